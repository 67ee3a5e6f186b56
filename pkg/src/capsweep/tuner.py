"""Power-cap recommendation.

Two strategies: the fixed 80%-of-TDP rule of thumb, and a measured search
that treats energy-to-solution as a unimodal function of the cap and
narrows it down with golden-section search. :func:`tune` layers a
performance-loss budget on top of the search.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

from capsweep.errors import PreconditionError, TuneAborted

PHI = (1.0 + math.sqrt(5.0)) / 2.0


@dataclass
class TuneResult:
    recommended_cap_w: int
    evaluations: list[tuple[int, float, float | None]] = field(default_factory=list)
    method: str = "golden_section"
    perf_loss_vs_reference: float | None = None
    bracket: tuple[float, float] | None = None
    reference_cap_w: int | None = None

    def evaluation(self, cap_w: int) -> tuple[int, float, float | None] | None:
        for ev in self.evaluations:
            if ev[0] == cap_w:
                return ev
        return None

    def to_dict(self) -> dict:
        return {
            "recommended_cap_w": self.recommended_cap_w,
            "method": self.method,
            "perf_loss_vs_reference": self.perf_loss_vs_reference,
            "reference_cap_w": self.reference_cap_w,
            "bracket": list(self.bracket) if self.bracket is not None else None,
            "evaluations": [
                {"cap_w": c, "energy_j": e, "runtime_s": r} for c, e, r in self.evaluations
            ],
        }

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cap_w", "energy_j", "runtime_s"])
            for c, e, r in self.evaluations:
                w.writerow([c, repr(float(e)), "" if r is None else repr(float(r))])


def rule_of_thumb_cap(tdp_w: int) -> int:
    """80% of TDP, rounded half up to whole watts."""
    if tdp_w <= 0:
        raise PreconditionError("tdp_w must be positive")
    return int((8 * tdp_w + 5) // 10)


def max_gss_evaluations(lo_w: float, hi_w: float, tol_w: float) -> int:
    """Upper bound on :func:`golden_section_cap` evaluations."""
    return math.ceil(math.log((hi_w - lo_w) / tol_w) / math.log(PHI)) + 2


def golden_section_cap(
    evaluate: Callable[[int], float],
    lo_w: int,
    hi_w: int,
    tol_w: float = 5.0,
) -> TuneResult:
    """Minimise ``evaluate`` over integer caps in ``[lo_w, hi_w]``.

    Golden-section search in its integer (Fibonacci) form: probes are whole
    watts at Fibonacci offsets, one interior probe is reused per step, and no
    cap is evaluated twice. The search stops once the candidate bracket is at
    most ``tol_w`` wide and recommends its midpoint (rounded down). Ties keep
    the lower-cap half.
    """
    if not lo_w < hi_w:
        raise PreconditionError("need lo_w < hi_w")
    if tol_w < 1:
        raise PreconditionError("tol_w must be >= 1 W")
    lo_w, hi_w = int(lo_w), int(hi_w)

    fib = [1, 1]
    while fib[-1] < hi_w - lo_w + 2:
        fib.append(fib[-1] + fib[-2])
    k = len(fib) - 1
    # open bracket (a, b); caps above hi_w are padding that is never run
    a = lo_w - 1
    b = a + fib[k]
    evals: list[tuple[int, float, float | None]] = []
    cache: dict[int, float] = {}

    def bracket() -> tuple[int, int]:
        return a + 1, min(b - 1, hi_w)

    def midpoint() -> int:
        lo, hi = bracket()
        return (lo + hi) // 2

    def f(cap: int) -> float:
        if cap > hi_w:
            return math.inf
        if cap not in cache:
            try:
                cache[cap] = float(evaluate(cap))
            except Exception as exc:
                partial = TuneResult(midpoint(), list(evals), "golden_section", bracket=bracket())
                raise TuneAborted(partial, exc) from exc
            evals.append((cap, cache[cap], None))
        return cache[cap]

    def width() -> int:
        lo, hi = bracket()
        return hi - lo

    if width() <= tol_w:
        f(midpoint())
        return TuneResult(midpoint(), evals, "golden_section", bracket=bracket())

    c, d = a + fib[k - 2], a + fib[k - 1]
    fc, fd = f(c), f(d)
    while True:
        k -= 1
        if fc <= fd:
            b = d
            if width() <= tol_w:
                break
            d, fd = c, fc
            c = a + fib[k - 2]
            fc = f(c)
        else:
            a = c
            if width() <= tol_w:
                break
            c, fc = d, fd
            d = a + fib[k - 1]
            fd = f(d)

    return TuneResult(midpoint(), evals, "golden_section", bracket=bracket())


def is_unimodal(values: Sequence[float], rtol: float = 0.0) -> bool:
    """True if ``values`` never rises and later falls (changes within
    ``rtol`` relative count as flat)."""
    rising = False
    for prev, cur in zip(values, values[1:]):
        slack = rtol * max(abs(prev), abs(cur))
        if cur > prev + slack:
            rising = True
        elif cur < prev - slack and rising:
            return False
    return True


def tune(
    runner: Callable[[int], tuple[float, float]],
    lo_w: int,
    hi_w: int,
    perf_loss_budget: float = 0.05,
    reference_cap_w: int = 150,
    *,
    tol_w: float = 5.0,
    trials: int = 1,
    grid_fallback: bool = True,
    grid_step_w: int = 10,
    unimodal_rtol: float = 1e-3,
) -> TuneResult:
    """Energy-optimal cap whose runtime stays within budget of the reference.

    ``runner(cap)`` returns ``(energy_j, runtime_s)``; each cap is measured
    ``trials`` times and averaged, and never re-measured. The reference cap is
    measured first, then golden-section search runs on energy. If the probes
    are not unimodal (measurement noise), every cap on the ``grid_step_w``
    lattice is measured and the lattice argmin replaces the search result.

    The recommendation is the cheapest measured cap at or above the search
    result whose runtime is within ``(1 + perf_loss_budget)`` of the
    reference, with the reference itself as the fallback. Restricting the
    choice to measured caps makes the achieved energy non-increasing in the
    budget.
    """
    if perf_loss_budget < 0:
        raise PreconditionError("perf_loss_budget must be >= 0")
    if not lo_w <= reference_cap_w <= hi_w:
        raise PreconditionError("reference_cap_w must lie in [lo_w, hi_w]")
    if trials < 1:
        raise PreconditionError("trials must be >= 1")

    measured: dict[int, tuple[float, float]] = {}
    order: list[int] = []

    def measure(cap: int) -> tuple[float, float]:
        if cap not in measured:
            runs = [runner(cap) for _ in range(trials)]
            measured[cap] = (
                math.fsum(e for e, _ in runs) / trials,
                math.fsum(r for _, r in runs) / trials,
            )
            order.append(cap)
        return measured[cap]

    def evaluations() -> list[tuple[int, float, float | None]]:
        return [(c, measured[c][0], measured[c][1]) for c in order]

    try:
        measure(reference_cap_w)
        gss = golden_section_cap(lambda c: measure(c)[0], lo_w, hi_w, tol_w)
        rec = gss.recommended_cap_w
        measure(rec)
        method = "golden_section"
        probes = sorted(c for c, _, _ in gss.evaluations)
        if grid_fallback and not is_unimodal([measured[c][0] for c in probes], unimodal_rtol):
            lattice = list(range(lo_w, hi_w + 1, grid_step_w))
            for cap in lattice:
                measure(cap)
            rec = min(lattice, key=lambda c: (measured[c][0], c))
            method = "grid"
    except TuneAborted as exc:
        exc.partial.evaluations = evaluations()
        raise
    except Exception as exc:
        raise TuneAborted(TuneResult(reference_cap_w, evaluations(), "golden_section"), exc) from exc

    _, ref_runtime = measured[reference_cap_w]
    limit = (1.0 + perf_loss_budget) * ref_runtime
    candidates = [c for c in measured if c >= rec or c == reference_cap_w]
    feasible = [c for c in candidates if measured[c][1] <= limit]
    best = min(feasible, key=lambda c: (measured[c][0], measured[c][1], c))
    return TuneResult(
        recommended_cap_w=best,
        evaluations=evaluations(),
        method=method,
        perf_loss_vs_reference=measured[best][1] / ref_runtime - 1.0,
        bracket=gss.bracket,
        reference_cap_w=reference_cap_w,
    )
