"""Normalised efficiency / performance matrices and stall-ratio ranges.

Each matrix cell is the trial mean of a metric divided by the trial mean at
the baseline cell, so an energy value of 0.75 reads "25% less energy than the
baseline configuration" and a runtime value of 1.04 reads "4% slower".
"""

from __future__ import annotations

import csv
import json
import math
import os
import statistics
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from capsweep.campaign import RunResult
from capsweep.errors import BaselineMissing, Infeasible, NoCycleData, PreconditionError
from capsweep.telemetry import FreqDistribution
from capsweep.tuner import rule_of_thumb_cap

METRICS = {
    "energy_rapl": lambda r: r.energy_rapl_j,
    "energy_supply": lambda r: r.energy_supply_j,
    "runtime": lambda r: r.runtime_s,
}


@dataclass(frozen=True, eq=False)
class EffMatrix:
    """Grid of ratios to the baseline cell; ``values[i, j]`` is cap ``caps_w[i]``
    with ``core_counts[j]`` cores and NaN where no run succeeded."""

    caps_w: tuple[int, ...]
    core_counts: tuple[int, ...]
    values: np.ndarray
    n_trials: np.ndarray
    baseline: tuple[int, int]
    metric: str
    workload: str = ""

    def value(self, cap_w: int, cores: int) -> float | None:
        v = self.values[self.caps_w.index(cap_w), self.core_counts.index(cores)]
        return None if math.isnan(v) else float(v)

    def missing(self) -> list[tuple[int, int]]:
        return [
            (c, n)
            for i, c in enumerate(self.caps_w)
            for j, n in enumerate(self.core_counts)
            if math.isnan(self.values[i, j])
        ]

    def cells(self) -> Iterable[tuple[int, int, float | None, int]]:
        for i, c in enumerate(self.caps_w):
            for j, n in enumerate(self.core_counts):
                v = self.values[i, j]
                yield c, n, (None if math.isnan(v) else float(v)), int(self.n_trials[i, j])

    def gain(self, cap_w: int, cores: int) -> float | None:
        """Efficiency gain ``1 - ratio`` (meaningful for energy metrics)."""
        v = self.value(cap_w, cores)
        return None if v is None else 1.0 - v


def _aggregate(values: list[float], how: str) -> float:
    if how == "mean":
        return math.fsum(values) / len(values)
    if how == "median":
        return float(statistics.median(values))
    raise PreconditionError(f"unknown aggregate {how!r}")


def _single_workload(results: Sequence[RunResult], workload: str | None) -> tuple[list[RunResult], str]:
    names = sorted({r.config.workload for r in results})
    if workload is None:
        if len(names) > 1:
            raise PreconditionError(f"results mix workloads {names}; pick one")
        workload = names[0] if names else ""
    return [r for r in results if r.config.workload == workload], workload


def build_matrix(
    results: Sequence[RunResult],
    metric: str = "energy_rapl",
    baseline: tuple[int, int] = (150, 64),
    *,
    workload: str | None = None,
    aggregate: str = "mean",
) -> EffMatrix:
    """Normalise ``metric`` over the cap x core grid covered by ``results``.

    Failed runs (nonzero exit status) and runs lacking the metric are ignored.

    Raises:
        BaselineMissing: no usable run at the baseline cell.
    """
    if metric not in METRICS:
        raise PreconditionError(f"unknown metric {metric!r}; choose from {sorted(METRICS)}")
    get = METRICS[metric]
    rows, workload = _single_workload(results, workload)
    caps = sorted({r.config.cap_w for r in rows} | {baseline[0]})
    cores = sorted({r.config.cores for r in rows} | {baseline[1]})
    cell: dict[tuple[int, int], list[float]] = defaultdict(list)
    for r in rows:
        v = get(r)
        if r.ok and v is not None:
            cell[(r.config.cap_w, r.config.cores)].append(float(v))
    if not cell.get(tuple(baseline)):
        raise BaselineMissing(f"no successful {workload!r} run at {baseline[0]} W / {baseline[1]} cores")
    base = _aggregate(cell[tuple(baseline)], aggregate)
    values = np.full((len(caps), len(cores)), np.nan)
    counts = np.zeros((len(caps), len(cores)), dtype=int)
    for i, c in enumerate(caps):
        for j, n in enumerate(cores):
            vals = cell.get((c, n))
            if vals:
                values[i, j] = _aggregate(vals, aggregate) / base
                counts[i, j] = len(vals)
    return EffMatrix(tuple(caps), tuple(cores), values, counts, (int(baseline[0]), int(baseline[1])), metric, workload)


@dataclass(frozen=True)
class StallRange:
    workload: str
    min_ratio: float
    max_ratio: float
    per_cap: dict[int, float]

    @property
    def spread(self) -> float:
        return self.max_ratio - self.min_ratio


def stall_range(
    results: Sequence[RunResult], *, workload: str | None = None, cores: int | None = None
) -> StallRange:
    """Trial-mean stall ratio per cap and its min/max over caps.

    With several core counts in ``results`` and ``cores`` unset, the largest
    core count is used.

    Raises:
        NoCycleData: fewer than two caps carry cycle counters.
    """
    rows, workload = _single_workload(results, workload)
    rows = [r for r in rows if r.ok and r.stall_ratio is not None]
    if cores is None and rows:
        cores = max(r.config.cores for r in rows)
    by_cap: dict[int, list[float]] = defaultdict(list)
    for r in rows:
        if r.config.cores == cores:
            by_cap[r.config.cap_w].append(r.stall_ratio)
    if len(by_cap) < 2:
        raise NoCycleData(f"{workload!r}: need cycle data at >= 2 caps, have {len(by_cap)}")
    per_cap = {c: math.fsum(v) / len(v) for c, v in sorted(by_cap.items())}
    return StallRange(workload, min(per_cap.values()), max(per_cap.values()), per_cap)


class Tradeoff(NamedTuple):
    cap_w: int
    cores: int
    energy_ratio: float
    runtime_ratio: float


def best_tradeoff(energy: EffMatrix, runtime: EffMatrix, perf_loss_budget: float) -> Tradeoff:
    """Lowest-energy cell with runtime ratio <= 1 + budget.

    Ties go to the lower runtime ratio, then the lower cap, then fewer cores.
    """
    if perf_loss_budget < 0:
        raise PreconditionError("perf_loss_budget must be >= 0")
    if (energy.caps_w, energy.core_counts, energy.baseline) != (
        runtime.caps_w, runtime.core_counts, runtime.baseline
    ):
        raise PreconditionError("energy and runtime matrices must share axes and baseline")
    limit = 1.0 + perf_loss_budget
    best = None
    for i, c in enumerate(energy.caps_w):
        for j, n in enumerate(energy.core_counts):
            e, t = energy.values[i, j], runtime.values[i, j]
            if math.isnan(e) or math.isnan(t) or t > limit:
                continue
            key = (e, t, c, n)
            if best is None or key < best:
                best = key
    if best is None:
        raise Infeasible(f"no cell within a {perf_loss_budget:.1%} runtime budget")
    e, t, c, n = best
    return Tradeoff(int(c), int(n), float(e), float(t))


# -- exports -----------------------------------------------------------------


def _num(x: float | None) -> str:
    return "" if x is None else repr(float(x))


def export_matrix_csv(matrix: EffMatrix, path: str | os.PathLike) -> None:
    """Long-form ``cap_w,cores,value,n_trials,gain``; missing cells have empty
    value and gain."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cap_w", "cores", "value", "n_trials", "gain"])
        for c, n, v, k in matrix.cells():
            w.writerow([c, n, _num(v), k, _num(None if v is None else 1.0 - v)])


def export_distribution_csv(
    distributions: Mapping[tuple[int, int], FreqDistribution], path: str | os.PathLike
) -> None:
    """``cap_w,cores,bin_lo_khz,bin_hi_khz,count`` rows, sorted by cell."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cap_w", "cores", "bin_lo_khz", "bin_hi_khz", "count"])
        for (cap, cores) in sorted(distributions):
            for lo, hi, count in distributions[(cap, cores)].bins():
                w.writerow([cap, cores, lo, hi, count])


def export_stall_csv(ranges: Iterable[StallRange], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["workload", "cap_w", "mean_stall_ratio"])
        for sr in sorted(ranges, key=lambda s: s.workload):
            for cap, ratio in sorted(sr.per_cap.items()):
                w.writerow([sr.workload, cap, repr(float(ratio))])


def summary_report(
    results: Sequence[RunResult],
    baseline: tuple[int, int] = (150, 64),
    *,
    workload: str | None = None,
    budgets: Sequence[float] = (0.0, 0.05, 0.10),
    tdp_w: int = 150,
    metric: str = "energy_rapl",
) -> dict:
    """Baseline, best trade-off per budget, and the rule-of-thumb cell."""
    energy = build_matrix(results, metric, baseline, workload=workload)
    runtime = build_matrix(results, "runtime", baseline, workload=workload)
    out: dict = {
        "workload": energy.workload,
        "metric": metric,
        "baseline": {"cap_w": baseline[0], "cores": baseline[1]},
        "best_tradeoff": [],
    }
    for b in budgets:
        try:
            t = best_tradeoff(energy, runtime, b)
            out["best_tradeoff"].append({
                "budget": b,
                "cap_w": t.cap_w,
                "cores": t.cores,
                "energy_ratio": t.energy_ratio,
                "efficiency_gain": 1.0 - t.energy_ratio,
                "runtime_ratio": t.runtime_ratio,
            })
        except Infeasible:
            out["best_tradeoff"].append({"budget": b, "infeasible": True})
    rot = rule_of_thumb_cap(tdp_w)
    entry: dict = {"tdp_w": tdp_w, "cap_w": rot, "cores": baseline[1]}
    if rot in energy.caps_w:
        e = energy.value(rot, baseline[1])
        t = runtime.value(rot, baseline[1])
        entry.update({
            "energy_ratio": e,
            "efficiency_gain": None if e is None else 1.0 - e,
            "runtime_ratio": t,
        })
    else:
        entry["measured"] = False
    out["rule_of_thumb"] = entry
    return out


def write_summary(summary: dict, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
