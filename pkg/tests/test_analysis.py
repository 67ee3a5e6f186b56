from __future__ import annotations

import csv
import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capsweep.analysis import (
    EffMatrix,
    best_tradeoff,
    build_matrix,
    export_distribution_csv,
    export_matrix_csv,
    export_stall_csv,
    stall_range,
    summary_report,
)
from capsweep.campaign import CampaignSpec, RunConfig, RunResult, SimBackend, SimWorkload, run_grid
from capsweep.errors import BaselineMissing, Infeasible, NoCycleData, PreconditionError
from capsweep.simcpu import preset
from capsweep.telemetry import CycleCounts, distribution_of


def _r(cap, cores, energy, runtime=1.0, trial=1, wl="w", cycles=None, status=0, supply=None):
    return RunResult(RunConfig(cap, cores, wl, trial), runtime, energy, supply, cycles, exit_status=status)


def _matrix(caps, cores, vals, metric="energy_rapl", baseline=(150, 64)):
    v = np.asarray(vals, dtype=float)
    return EffMatrix(tuple(caps), tuple(cores), v, np.ones_like(v, dtype=int), baseline, metric)


def test_two_cells_direct_ratio():
    m = build_matrix([_r(150, 64, 100.0), _r(90, 64, 80.0)])
    assert m.value(150, 64) == 1.0 and m.value(90, 64) == 0.8
    assert m.gain(90, 64) == pytest.approx(0.2)


def test_trial_mean_and_failed_runs():
    rs = [_r(150, 64, 100.0, trial=1), _r(150, 64, 110.0, trial=2),
          _r(90, 64, 60.0, trial=1), _r(90, 64, 1e9, trial=2, status=1)]
    m = build_matrix(rs)
    assert m.value(90, 64) == pytest.approx(60 / 105)
    assert int(m.n_trials[0, 0]) == 1
    med = build_matrix(rs + [_r(150, 64, 200.0, trial=3)], aggregate="median")
    assert med.value(150, 64) == 1.0 and med.value(90, 64) == 60 / 110


def test_missing_cells_are_nan():
    m = build_matrix([_r(150, 64, 100.0), _r(90, 32, 80.0)])
    assert m.value(90, 64) is None and m.missing() == [(90, 64), (150, 32)]


def test_baseline_missing():
    with pytest.raises(BaselineMissing):
        build_matrix([_r(90, 64, 1.0)])
    with pytest.raises(BaselineMissing):
        build_matrix([_r(150, 64, 1.0, status=2)])


def test_metric_choice():
    rs = [_r(150, 64, 100.0, runtime=4.0, supply=400.0), _r(90, 64, 50.0, runtime=5.0, supply=300.0)]
    assert build_matrix(rs, "runtime").value(90, 64) == 1.25
    assert build_matrix(rs, "energy_supply").value(90, 64) == 0.75
    with pytest.raises(PreconditionError):
        build_matrix(rs, "joy")
    with pytest.raises(PreconditionError):
        build_matrix(rs + [_r(150, 64, 1.0, wl="other")])


@settings(max_examples=40, deadline=None)
@given(
    energies=st.lists(st.floats(1, 1e4), min_size=6, max_size=6),
    k=st.floats(1e-3, 1e3),
    seed=st.integers(0, 2**32 - 1),
)
def test_normalisation_invariance_and_trial_order(energies, k, seed):
    caps = [150, 150, 150, 90, 90, 120]
    rs = [_r(c, 64, e, trial=i + 1) for i, (c, e) in enumerate(zip(caps, energies))]
    m = build_matrix(rs)
    scaled = build_matrix([_r(r.config.cap_w, 64, r.energy_rapl_j * k, trial=r.config.trial) for r in rs])
    np.testing.assert_allclose(scaled.values, m.values, rtol=1e-12)
    shuffled = list(rs)
    random.Random(seed).shuffle(shuffled)
    assert np.array_equal(build_matrix(shuffled).values, m.values)


# -- stall range ---------------------------------------------------------------

def test_constant_stall():
    rs = [_r(c, 64, 1.0, cycles=CycleCounts(3, 10)) for c in (70, 110, 150)]
    sr = stall_range(rs)
    assert sr.min_ratio == sr.max_ratio == 0.3 and sr.spread == 0


def test_single_cap_no_cycle_data():
    with pytest.raises(NoCycleData):
        stall_range([_r(150, 64, 1.0, cycles=CycleCounts(1, 2))])
    with pytest.raises(NoCycleData):
        stall_range([_r(150, 64, 1.0), _r(90, 64, 1.0)])


def test_simulated_memory_stalls_monotone(tmp_path):
    wl = SimWorkload("mem", preset("memory_bound"))
    spec = CampaignSpec(core_counts=[64], workloads=[wl], output_dir=tmp_path)
    sr = stall_range(run_grid(spec, SimBackend()))
    vals = [sr.per_cap[c] for c in sorted(sr.per_cap)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    assert sr.max_ratio == sr.per_cap[180] and sr.min_ratio == sr.per_cap[70]


# -- best trade-off --------------------------------------------------------------

def test_tradeoff_picks_cell_within_budget():
    caps, cores = (90, 150), (26, 64)
    energy = _matrix(caps, cores, [[0.75, 0.70], [0.95, 1.0]])
    runtime = _matrix(caps, cores, [[1.04, 1.30], [1.01, 1.0]], "runtime")
    t = best_tradeoff(energy, runtime, 0.05)
    assert (t.cap_w, t.cores, t.energy_ratio, t.runtime_ratio) == (90, 26, 0.75, 1.04)


def test_tradeoff_zero_budget_baseline():
    energy = _matrix((90, 150), (64,), [[0.8], [1.0]])
    runtime = _matrix((90, 150), (64,), [[1.2], [1.0]], "runtime")
    assert best_tradeoff(energy, runtime, 0.0)[:2] == (150, 64)


def test_tradeoff_infinite_budget_is_argmin():
    energy = _matrix((90, 150), (32, 64), [[0.6, 0.9], [0.7, 1.0]])
    runtime = _matrix((90, 150), (32, 64), [[9.0, 1.0], [2.0, 1.0]], "runtime")
    assert best_tradeoff(energy, runtime, math.inf)[:2] == (90, 32)


def test_tradeoff_ties_and_missing():
    energy = _matrix((90, 120, 150), (64,), [[0.8], [0.8], [np.nan]])
    runtime = _matrix((90, 120, 150), (64,), [[1.02], [1.01], [1.0]], "runtime")
    assert best_tradeoff(energy, runtime, 0.05)[:2] == (120, 64)
    runtime2 = _matrix((90, 120, 150), (64,), [[1.01], [1.01], [1.0]], "runtime")
    assert best_tradeoff(energy, runtime2, 0.05)[:2] == (90, 64)
    with pytest.raises(Infeasible):
        best_tradeoff(energy, runtime, 0.0)
    with pytest.raises(PreconditionError):
        best_tradeoff(energy, runtime, -0.1)


@settings(max_examples=50, deadline=None)
@given(
    e=st.lists(st.floats(0.1, 2.0), min_size=9, max_size=9),
    t=st.lists(st.floats(0.5, 2.0), min_size=9, max_size=9),
    b1=st.floats(0, 1),
    b2=st.floats(0, 1),
)
def test_budget_monotone(e, t, b1, b2):
    e[8], t[8] = 1.0, 1.0
    energy = _matrix((70, 110, 150), (16, 32, 64), np.reshape(e, (3, 3)))
    runtime = _matrix((70, 110, 150), (16, 32, 64), np.reshape(t, (3, 3)), "runtime")
    lo, hi = sorted((b1, b2))
    assert best_tradeoff(energy, runtime, hi).energy_ratio <= best_tradeoff(energy, runtime, lo).energy_ratio
    assert best_tradeoff(energy, runtime, math.inf).energy_ratio == min(e)


# -- exports ---------------------------------------------------------------------

def _read(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_matrix_export(tmp_path):
    m = build_matrix([_r(150, 64, 100.0), _r(90, 64, 75.0), _r(90, 32, 80.0)])
    export_matrix_csv(m, tmp_path / "m.csv")
    rows = _read(tmp_path / "m.csv")
    assert rows[0][:4] == ["cap_w", "cores", "value", "n_trials"]
    assert ["90", "64", "0.75", "1", "0.25"] in rows
    assert ["150", "32", "", "0", ""] in rows
    assert ["150", "64", "1.0", "1", "0.0"] in rows


def test_distribution_export(tmp_path):
    d = {(90, 64): distribution_of([1_250_000, 3_850_000])}
    export_distribution_csv(d, tmp_path / "d.csv")
    rows = _read(tmp_path / "d.csv")
    assert rows[0] == ["cap_w", "cores", "bin_lo_khz", "bin_hi_khz", "count"]
    assert rows[1] == ["90", "64", "1200000", "1300000", "1"]
    assert len(rows) == 28


def test_stall_export(tmp_path):
    rs = [_r(c, 64, 1.0, cycles=CycleCounts(1, 4)) for c in (90, 150)]
    export_stall_csv([stall_range(rs)], tmp_path / "s.csv")
    assert _read(tmp_path / "s.csv") == [
        ["workload", "cap_w", "mean_stall_ratio"], ["w", "90", "0.25"], ["w", "150", "0.25"]]


def test_summary_report():
    rs = [_r(150, 64, 100.0, 1.0), _r(120, 64, 90.0, 1.03), _r(90, 64, 70.0, 1.08)]
    rep = summary_report(rs)
    picks = {b["budget"]: b["cap_w"] for b in rep["best_tradeoff"]}
    assert picks == {0.0: 150, 0.05: 120, 0.10: 90}
    assert rep["rule_of_thumb"]["cap_w"] == 120
    assert rep["rule_of_thumb"]["efficiency_gain"] == pytest.approx(0.1)
