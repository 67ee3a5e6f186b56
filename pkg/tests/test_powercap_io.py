from __future__ import annotations

import os
import random
from pathlib import Path

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from capsweep.errors import ParseError, PartialWriteError, PreconditionError, ZoneNotFoundError
from capsweep.fixtures import PACKAGE_MAX_ENERGY_RANGE_UJ, default_rapl_zones
from capsweep.powercap_io import (
    ConstraintConfig,
    EnergyReading,
    ZoneConfig,
    counter_delta,
    energy_delta_uj,
    format_zone_tree,
    parse_zone_tree,
    read_energy,
    set_power_limit_watts,
    snapshot_limits,
    write_limits,
    write_zone_tree,
)

MAX = PACKAGE_MAX_ENERGY_RANGE_UJ


# [PAPER] default configuration of the reference server
def test_default_config_fields(rapl_root):
    zones = parse_zone_tree(rapl_root)
    assert zones == default_rapl_zones()
    z0 = zones[0]
    lt, st_ = z0.constraints
    assert (lt.name, lt.power_limit_uw, lt.time_window_us, lt.max_power_uw) == (
        "long_term", 150000000, 999424, 150000000)
    assert (st_.name, st_.power_limit_uw, st_.time_window_us, st_.max_power_uw) == (
        "short_term", 180000000, 1952, 376000000)
    (dram,) = z0.subzones
    assert dram.name == "dram" and dram.enabled is False
    assert dram.max_energy_range_uj == 65712999613


# [TRIVIAL]
def test_empty_tree(tmp_path):
    assert parse_zone_tree(tmp_path) == []


def test_missing_root(tmp_path):
    with pytest.raises(ZoneNotFoundError):
        parse_zone_tree(tmp_path / "absent")


# [TRIVIAL]
def test_single_zone_single_constraint(tmp_path):
    z = tmp_path / "intel-rapl:0"
    z.mkdir()
    for name, val in [("name", "package-0"), ("enabled", "1"), ("max_energy_range_uj", "1000"),
                      ("constraint_0_name", "long_term"), ("constraint_0_power_limit_uw", "70000000"),
                      ("constraint_0_time_window_us", "999424")]:
        (z / name).write_text(val + "\n")
    (zone,) = parse_zone_tree(tmp_path)
    assert zone.constraints == (ConstraintConfig("long_term", 70000000, 999424, None),)
    assert zone.constraints[0].power_limit_uw / 1e6 == 70


def test_unknown_constraint_preserved_and_flagged(tmp_path, caplog):
    zone = ZoneConfig(0, "package-0", True, 10, (ConstraintConfig("peak_power", 5, 1),))
    write_zone_tree([zone], tmp_path)
    (parsed,) = parse_zone_tree(tmp_path)
    assert parsed.constraints[0].name == "peak_power"
    assert not parsed.constraints[0].known
    assert "peak_power" in caplog.text
    assert set_power_limit_watts([parsed], 100).writes == []


def test_zones_sorted_numerically(tmp_path):
    zones = [ZoneConfig(i, f"package-{i}", True, 10) for i in (0, 2, 10)]
    write_zone_tree(zones, tmp_path)
    assert [z.index for z in parse_zone_tree(tmp_path)] == [0, 2, 10]


def test_garbage_attribute(rapl_root):
    (rapl_root / "intel-rapl:0" / "constraint_0_power_limit_uw").write_text("lots\n")
    with pytest.raises(ParseError):
        parse_zone_tree(rapl_root)


# [PAPER] cap script writes watts x 10^6 to both constraints of both packages
def test_set_cap_120(rapl_root):
    zones = parse_zone_tree(rapl_root)
    report = set_power_limit_watts(zones, 120)
    expected = [
        (rapl_root / f"intel-rapl:{z}" / f"constraint_{k}_power_limit_uw", "120000000")
        for z in (0, 1) for k in (0, 1)
    ]
    assert report.writes == expected
    for path, _ in expected:
        assert path.read_text() == "120000000\n"
    for z in parse_zone_tree(rapl_root):
        assert z.subzones[0].constraints[0].power_limit_uw == 0
        assert [c.time_window_us for c in z.constraints] == [999424, 1952]


# [PAPER] 150 W is the long-term default
def test_set_cap_150_restores_long_term(rapl_root):
    zones = parse_zone_tree(rapl_root)
    set_power_limit_watts(zones, 90)
    set_power_limit_watts(zones, 150)
    assert parse_zone_tree(rapl_root)[0].constraints[0].power_limit_uw == 150000000


@pytest.mark.parametrize("bad", [0, -1, 1.5, True])
def test_set_cap_rejects(rapl_root, bad):
    with pytest.raises(PreconditionError):
        set_power_limit_watts(parse_zone_tree(rapl_root), bad)


def test_cap_above_max_power_warns(rapl_root):
    report = set_power_limit_watts(parse_zone_tree(rapl_root), 160)
    # long_term max is 150 W on both zones; short_term max (376 W) is fine
    assert len(report.warnings) == 2
    assert len(report) == 4


def test_dry_run_touches_nothing(rapl_root):
    from conftest import tree_digest

    before = tree_digest(rapl_root)
    report = set_power_limit_watts(parse_zone_tree(rapl_root), 70, dry_run=True)
    assert len(report) == 4 and report.dry_run
    assert tree_digest(rapl_root) == before


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores file permissions")
def test_partial_write_reports_successes(rapl_root):
    zones = parse_zone_tree(rapl_root)
    target = rapl_root / "intel-rapl:1" / "constraint_0_power_limit_uw"
    target.chmod(0o444)
    with pytest.raises(PartialWriteError) as info:
        set_power_limit_watts(zones, 100)
    assert info.value.failed_path == target
    assert len(info.value.succeeded) == 2


def test_partial_write_via_directory(rapl_root):
    # a directory in place of the attribute fails for root too
    zones = parse_zone_tree(rapl_root)
    target = rapl_root / "intel-rapl:1" / "constraint_1_power_limit_uw"
    target.unlink()
    target.mkdir()
    with pytest.raises(PartialWriteError) as info:
        set_power_limit_watts(zones, 100)
    assert info.value.failed_path == target
    assert [p for p, _ in info.value.succeeded] == [
        rapl_root / "intel-rapl:0" / "constraint_0_power_limit_uw",
        rapl_root / "intel-rapl:0" / "constraint_1_power_limit_uw",
        rapl_root / "intel-rapl:1" / "constraint_0_power_limit_uw",
    ]


def test_snapshot_and_rollback(rapl_root):
    zones = parse_zone_tree(rapl_root)
    snap = snapshot_limits(zones)
    set_power_limit_watts(zones, 80)
    write_limits(snap)
    assert parse_zone_tree(rapl_root) == default_rapl_zones()


# [TRIVIAL]
def test_read_energy(rapl_root):
    zone = parse_zone_tree(rapl_root)[0]
    (zone.path / "energy_uj").write_text("123456\n")
    r = read_energy(zone)
    assert (r.zone_index, r.energy_uj) == (0, 123456)
    (zone.path / "energy_uj").write_text(f"{MAX}\n")
    assert read_energy(zone).energy_uj == MAX


@pytest.mark.parametrize("content", ["-5", "", "12x"])
def test_read_energy_parse_error(rapl_root, content):
    zone = parse_zone_tree(rapl_root)[0]
    (zone.path / "energy_uj").write_text(content)
    with pytest.raises(ParseError):
        read_energy(zone)


# [TRIVIAL] / [DERIVED]
@pytest.mark.parametrize("prev,curr,expected", [
    (100, 300, 200),
    (262143328800, 150, 200),
    (500, 500, 0),
])
def test_energy_delta_examples(prev, curr, expected):
    a, b = EnergyReading(0, prev, 0), EnergyReading(0, curr, 1)
    assert energy_delta_uj(a, b, MAX) == expected


def _wrap_oracle_mismatches(rng: random.Random, cases: int) -> int:
    """Simulate true monotone counters, reduce modulo the range, compare totals."""
    bad = 0
    for _ in range(cases):
        max_range = rng.choice([MAX, 65712999613, rng.randint(10, 10**6)])
        true = rng.randint(0, 10 * max_range)
        start = true
        prev = true % max_range
        acc = 0
        for _ in range(rng.randint(1, 12)):
            true += rng.randint(0, max_range - 1)  # at most one wrap per interval
            curr = true % max_range
            acc += counter_delta(prev, curr, max_range)
            prev = curr
        bad += acc != true - start
    return bad


def test_wraparound_randomised():
    assert _wrap_oracle_mismatches(random.Random(20240601), 10_000) == 0


# -- properties --------------------------------------------------------------

_names = st.sampled_from(["long_term", "short_term", "peak_power"])
_constraint = st.builds(
    ConstraintConfig,
    name=_names,
    power_limit_uw=st.integers(0, 10**9),
    time_window_us=st.integers(1, 10**7),
    max_power_uw=st.none() | st.integers(0, 10**9),
)


@st.composite
def _zone_trees(draw):
    n = draw(st.integers(0, 3))
    zones = []
    for i in range(n):
        subs = tuple(
            ZoneConfig(j, draw(st.sampled_from(["dram", "core", "uncore"])), draw(st.booleans()),
                       draw(st.integers(1, 10**12)), tuple(draw(st.lists(_constraint, max_size=2))))
            for j in range(draw(st.integers(0, 2)))
        )
        zones.append(ZoneConfig(i, f"package-{i}", draw(st.booleans()), draw(st.integers(1, 10**12)),
                                tuple(draw(st.lists(_constraint, max_size=3))), subs))
    return zones


@settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(zones=_zone_trees())
def test_round_trip(tmp_path_factory, zones):
    root = tmp_path_factory.mktemp("rt")
    assert parse_zone_tree(write_zone_tree(zones, root)) == zones


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(watts=st.integers(1, 400))
def test_set_then_parse(tmp_path_factory, watts):
    from capsweep.fixtures import write_default_fixture

    root = write_default_fixture(tmp_path_factory.mktemp("cap"))
    set_power_limit_watts(parse_zone_tree(root), watts)
    for z in parse_zone_tree(root):
        assert [c.power_limit_uw for c in z.constraints] == [watts * 10**6] * 2


@given(
    max_range=st.integers(2, 10**12),
    start=st.integers(0, 10**13),
    steps=st.lists(st.floats(0, 1, exclude_max=True), min_size=1, max_size=20),
)
def test_delta_sum_recovers_total(max_range, start, steps):
    true, prev, acc = start, start % max_range, 0
    for frac in steps:
        true += int(frac * max_range)
        curr = true % max_range
        acc += counter_delta(prev, curr, max_range)
        prev = curr
    assert acc == true - start


def test_format_layout(rapl_root):
    text = format_zone_tree(parse_zone_tree(rapl_root))
    lines = text.splitlines()
    assert lines[:5] == [
        "Zone 0",
        "  name: package-0",
        "  enabled: 1",
        "  max_energy_range_uj: 262143328850",
        "  Constraint 0",
    ]
    assert "    power_limit_uw: 150000000" in lines
    assert "  Subzone 0" in lines
    assert "      name: long_term" in lines
    assert format_zone_tree([]) == ""
