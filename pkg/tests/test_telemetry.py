from __future__ import annotations

import csv
import sys
import time

import pytest
from hypothesis import given
from hypothesis import strategies as st

from capsweep.errors import (
    EmptyDistribution,
    PreconditionError,
    SamplerStateError,
    SourceUnavailable,
    UndefinedRatio,
)
from capsweep.fixtures import make_cpu_tree
from capsweep.powercap_io import parse_zone_tree
from capsweep.telemetry import (
    CommandCycleCounter,
    CycleCounts,
    Sample,
    SupplyFeed,
    Trace,
    distribution_of,
    export_trace_csv,
    freq_distribution,
    integrate_power_j,
    parse_supply_line,
    start_sampler,
    stall_ratio,
    stop_sampler,
    trace_rapl_energy_j,
)
from capsweep.topology import Topology, discover_topology, format_cpu_range, parse_cpu_list

S = 1_000_000_000


def _topology(tmp_path, rapl_root=None, n=4):
    cpu = make_cpu_tree(tmp_path / "cpu", n, cores_per_socket=2)
    zones = parse_zone_tree(rapl_root) if rapl_root is not None else ()
    return discover_topology(cpu, zones)


# -- topology ----------------------------------------------------------------

def test_cpu_lists():
    assert parse_cpu_list("0-3,5,8-9\n") == [0, 1, 2, 3, 5, 8, 9]
    assert parse_cpu_list("") == []
    assert format_cpu_range(64) == "0-63"
    assert format_cpu_range(1) == "0"
    with pytest.raises(PreconditionError):
        format_cpu_range(0)


def test_discover_topology(tmp_path):
    topo = discover_topology(make_cpu_tree(tmp_path, 8, cores_per_socket=4))
    assert topo.n_cores == 8
    assert topo.socket_of == (0, 0, 0, 0, 1, 1, 1, 1)
    assert topo.sockets_powered(4) == 1 and topo.sockets_powered(5) == 2


def test_contiguous_topology():
    t = Topology.contiguous(2, 32)
    assert t.n_cores == 64 and t.socket_of[31] == 0 and t.socket_of[32] == 1


# -- sampler -----------------------------------------------------------------

def test_sampler_rate_two_seconds(tmp_path, rapl_root):
    handle = start_sampler(_topology(tmp_path, rapl_root), 10, {"freq", "rapl"})
    time.sleep(2.0)
    trace = stop_sampler(handle)
    assert 18 <= len(trace) <= 22
    s = trace.samples[0]
    assert len(s.core_freq_khz) == 4 and len(s.zone_energy_uj) == 2


def test_start_stop_immediately(tmp_path, rapl_root):
    topo = _topology(tmp_path, rapl_root)
    trace = stop_sampler(start_sampler(topo))
    assert len(trace) >= 0 and trace.topology == topo


def test_stop_twice(tmp_path, rapl_root):
    handle = start_sampler(_topology(tmp_path, rapl_root))
    stop_sampler(handle)
    with pytest.raises(SamplerStateError):
        stop_sampler(handle)
    with pytest.raises(SamplerStateError):
        handle.start()


def test_rate_zero(tmp_path, rapl_root):
    with pytest.raises(PreconditionError):
        start_sampler(_topology(tmp_path, rapl_root), 0)


def test_supply_without_adapter(tmp_path):
    with pytest.raises(SourceUnavailable) as info:
        start_sampler(_topology(tmp_path), 10, {"supply"})
    assert info.value.source == "supply"


def test_rapl_without_zones(tmp_path):
    with pytest.raises(SourceUnavailable) as info:
        start_sampler(_topology(tmp_path), 10, {"rapl"})
    assert info.value.source == "rapl"


def test_unknown_source(tmp_path):
    with pytest.raises(PreconditionError):
        start_sampler(_topology(tmp_path), 10, {"temperature"})


def test_offline_cores_not_read(tmp_path, rapl_root):
    topo = _topology(tmp_path, rapl_root)
    (topo.cpu_root / "online").write_text("0-1\n")
    handle = start_sampler(topo, 50, {"freq"})
    time.sleep(0.1)
    trace = stop_sampler(handle)
    assert all(s.core_freq_khz[2:] == (None, None) for s in trace.samples)
    dist = freq_distribution(trace)
    assert dist.n_readings == 2 * len(trace)


def test_cycle_and_supply_sources(tmp_path, rapl_root):
    supply_file = tmp_path / "supply.csv"
    supply_file.write_text("1000,250.0\n1100,260.5\n")
    counter = CommandCycleCounter([sys.executable, "-c", "print('noise'); print('30,100')"])
    with SupplyFeed.from_file(supply_file) as feed:
        feed.wait_idle()
        handle = start_sampler(_topology(tmp_path, rapl_root), 20, {"supply", "cycles"},
                               supply=feed, cycle_counter=counter)
        time.sleep(0.15)
        trace = stop_sampler(handle)
    assert trace.samples
    assert all(s.supply_watts == 260.5 for s in trace.samples)
    assert all((s.stalled_cycles, s.total_cycles) == (30, 100) for s in trace.samples)


# -- external sources --------------------------------------------------------

def test_supply_parsing(tmp_path):
    assert parse_supply_line("1700000000000,312.5") == (1700000000000, 312.5)
    assert parse_supply_line("# header") is None
    path = tmp_path / "p.csv"
    path.write_text("10,1.0\nbad line\n20,2.0\n15,9.9\n30,3.0\n")
    feed = SupplyFeed.from_file(path).start()
    feed.wait_idle()
    feed.stop()
    assert feed.series() == [(10_000_000, 1.0), (20_000_000, 2.0), (30_000_000, 3.0)]
    assert feed.series(15, 25) == [(20_000_000, 2.0)]


def test_supply_from_command():
    code = "for i in range(3): print(f'{1000 + i},{100 + i}')"
    feed = SupplyFeed.from_command([sys.executable, "-c", code]).start()
    feed.wait_idle()
    feed.stop()
    assert [w for _, w in feed.series()] == [100.0, 101.0, 102.0]


def test_cycle_command_failure():
    with pytest.raises(SourceUnavailable) as info:
        CommandCycleCounter([sys.executable, "-c", "import sys; sys.exit(3)"]).read()
    assert info.value.source == "cycles"


# -- integration -------------------------------------------------------------

def test_integrate_constant():
    assert integrate_power_j([(0, 100.0), (10 * S, 100.0)]) == 1000.0


def test_integrate_ramp():
    series = [(k * S // 10, 100.0 * k / 100) for k in range(101)]
    assert abs(integrate_power_j(series) - 500.0) <= 500.0 * 1e-12


def test_integrate_single_point():
    with pytest.warns(RuntimeWarning):
        assert integrate_power_j([(0, 50.0)]) == 0.0


def test_integrate_rejects_unordered():
    with pytest.raises(PreconditionError):
        integrate_power_j([(5, 1.0), (5, 1.0)])


_series = st.lists(
    st.tuples(st.integers(1, 10**9), st.floats(0, 1000, allow_nan=False)), min_size=2, max_size=30
).map(lambda pts: [(sum(dt for dt, _ in pts[: i + 1]), w) for i, (_, w) in enumerate(pts)])


@given(_series)
def test_integration_nonnegative(series):
    assert integrate_power_j(series) >= 0
    assert integrate_power_j([(t, 0.0) for t, _ in series]) == 0.0


@given(_series, st.integers(1, 28))
def test_integration_additive(series, cut):
    cut = min(cut, len(series) - 2) if len(series) > 2 else None
    if cut is None or cut < 1:
        return
    whole = integrate_power_j(series)
    parts = integrate_power_j(series[: cut + 1]) + integrate_power_j(series[cut:])
    assert parts == pytest.approx(whole, rel=1e-12, abs=1e-12)


# -- stall ratio -------------------------------------------------------------

def test_stall_ratio_examples():
    assert stall_ratio(CycleCounts(0, 1000)) == 0.0
    assert stall_ratio(CycleCounts(500, 1000)) == 0.5
    with pytest.raises(UndefinedRatio):
        stall_ratio(CycleCounts(0, 0))
    with pytest.raises(PreconditionError):
        CycleCounts(1000, 0)


@given(st.integers(0, 10**12), st.integers(1, 10**12), st.integers(1, 1000))
def test_stall_ratio_scale_invariant(s, extra, k):
    c = CycleCounts(s, s + extra)
    assert stall_ratio(CycleCounts(k * c.stalled, k * c.total)) == pytest.approx(stall_ratio(c), rel=1e-15)


# -- distributions -----------------------------------------------------------

def test_pinned_distribution():
    d = distribution_of([3_900_000] * 64)
    assert d.min_khz == d.max_khz == d.percentiles[50] == 3_900_000


# [DERIVED] linear interpolation on two points: 1.2 + 0.5 * (3.9 - 1.2)
def test_two_point_median():
    d = distribution_of([1_200_000, 3_900_000], [50])
    assert d.percentiles[50] == pytest.approx(1_200_000 + 0.5 * (3_900_000 - 1_200_000))
    assert d.percentiles[50] == 2_550_000


def test_histogram_bins():
    d = distribution_of([1_250_000, 1_250_000, 3_850_000])
    bins = d.bins()
    assert bins[0] == (1_200_000, 1_300_000, 2)
    assert bins[-1] == (3_800_000, 3_900_000, 1)
    assert len(bins) == 27 and sum(c for *_, c in bins) == 3
    wide = distribution_of([800_000])
    assert wide.bins()[0][0] == 800_000


def test_empty_distribution():
    with pytest.raises(EmptyDistribution):
        distribution_of([])


# -- trace reductions --------------------------------------------------------

def test_trace_energy_with_wrap(tmp_path):
    topo = _topology(tmp_path, None)
    from capsweep.powercap_io import ZoneConfig

    topo = Topology(topo.n_cores, topo.socket_of, (ZoneConfig(0, "package-0", True, 1000),))
    samples = (Sample(0, (), (990,)), Sample(1, (), (10,)), Sample(2, (), (30,)))
    assert trace_rapl_energy_j(Trace(samples, topo)) == [40 / 1e6]


def test_trace_requires_increasing_time(tmp_path):
    with pytest.raises(PreconditionError):
        Trace((Sample(5), Sample(5)), Topology.contiguous(1, 1))


def test_export_trace_csv(tmp_path):
    from capsweep.powercap_io import ZoneConfig

    topo = Topology(2, (0, 0), (ZoneConfig(0, "package-0", True, 1000),))
    trace = Trace((Sample(0, (1000, None), (5,), 200.0), Sample(10, (1100, None), (7,), 201.0)), topo)
    export_trace_csv(trace, tmp_path / "f.csv", tmp_path / "e.csv")
    freq = list(csv.reader(open(tmp_path / "f.csv")))
    energy = list(csv.reader(open(tmp_path / "e.csv")))
    assert freq[0] == ["t_ns", "core", "freq_khz"]
    assert freq[1:] == [["0", "0", "1000"], ["10", "0", "1100"]]
    assert energy[0] == ["t_ns", "zone", "energy_uj", "supply_w"]
    assert energy[1] == ["0", "package-0", "5", "200.0"]
