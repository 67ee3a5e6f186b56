"""Deterministic discrete-time simulator of a dual-socket, power-capped CPU.

The model has three parts:

* a per-socket power model ``P = n * alpha_c * V(f)**2 * f + V(f) * k * e**beta``
  with an affine voltage/frequency map, so the dynamic term scales with the
  number of active cores and the leakage term is paid once per powered socket;
* a P-state ladder from ``f_min`` to ``f_max`` driven by a sliding-window
  power limiter (one ladder step per tick at most), which mimics the RAPL
  contract that the mean power over ``window_us`` stays under the cap;
* a bandwidth-capped throughput model: each core retires
  ``min(ipc * f, mem_bw_cap / n_active)`` giga-operations per second, and the
  cycles it cannot use are counted as stalled.

Everything is plain floating point with no randomness, so identical inputs
produce bit-identical results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from capsweep.errors import DomainError, PreconditionError

__all__ = [
    "PowerModelParams",
    "WorkloadSpec",
    "SimResult",
    "PRESETS",
    "preset",
    "calibrate_defaults",
    "socket_power_w",
    "throughput_per_core",
    "simulate_run",
    "energy_per_work",
    "SupplyModel",
    "to_trace",
]

# Slack used for float comparisons against the power budget, in watts.
_EPS_W = 1e-9


@dataclass(frozen=True)
class PowerModelParams:
    """Simulator constants.

    ``alpha_c`` is the product of activity factor and switched capacitance in
    W / (V^2 GHz) per core. ``k * exp(beta)`` is the leakage current scale of
    one powered socket, so ``V(f) * k * exp(beta)`` is its static power.
    """

    alpha_c: float
    k: float
    beta: float = 0.0
    v0: float = 0.7
    v_slope: float = 0.4 / 2.7
    f_min: float = 1.2
    f_max: float = 3.9
    p_state_step: float = 0.1
    sockets: int = 2
    cores_per_socket: int = 32
    tdp_w: float = 150.0

    def __post_init__(self) -> None:
        for name in ("alpha_c", "k", "v0", "f_min", "f_max", "p_state_step", "tdp_w"):
            if not getattr(self, name) > 0:
                raise PreconditionError(f"{name} must be positive")
        if self.sockets < 1 or self.cores_per_socket < 1:
            raise PreconditionError("sockets and cores_per_socket must be >= 1")
        if not self.f_min < self.f_max:
            raise PreconditionError("f_min must be below f_max")
        if not self.voltage(self.f_max) > self.voltage(self.f_min) > 0:
            raise PreconditionError("voltage must increase with frequency")

    @property
    def total_cores(self) -> int:
        return self.sockets * self.cores_per_socket

    @property
    def leakage(self) -> float:
        """Per-socket leakage scale ``k * e**beta`` (static watts per volt)."""
        return self.k * math.exp(self.beta)

    def voltage(self, f: float) -> float:
        return self.v0 + self.v_slope * (f - self.f_min)

    def ladder(self) -> tuple[float, ...]:
        """P-state frequencies in GHz, ascending, ``f_max`` included."""
        n = int(round((self.f_max - self.f_min) / self.p_state_step))
        return tuple(round(self.f_min + i * self.p_state_step, 9) for i in range(n + 1))

    def active_per_socket(self, cores: int) -> tuple[int, ...]:
        """Contiguous fill: socket 0 first, then socket 1, and so on."""
        cps = self.cores_per_socket
        return tuple(min(cps, max(0, cores - s * cps)) for s in range(self.sockets))


def calibrate_defaults(
    *,
    tdp_w: float = 150.0,
    sockets: int = 2,
    cores_per_socket: int = 32,
    static_share: float = 0.5,
    v_min: float = 0.7,
    v_max: float = 1.1,
    f_min: float = 1.2,
    f_max: float = 3.9,
    p_state_step: float = 0.1,
) -> PowerModelParams:
    """Closed-form fit of the free constants.

    A fully active socket at ``f_max`` draws exactly ``tdp_w``, of which
    ``static_share`` is leakage.
    """
    if not 0.0 <= static_share < 1.0:
        raise PreconditionError("static_share must lie in [0, 1)")
    v_slope = (v_max - v_min) / (f_max - f_min)
    static_w = static_share * tdp_w
    dynamic_w = tdp_w - static_w
    alpha_c = dynamic_w / (cores_per_socket * v_max**2 * f_max)
    # beta is folded into k; a zero share would make k invalid, so keep it tiny.
    k = max(static_w, 1e-12) / v_max
    return PowerModelParams(
        alpha_c=alpha_c,
        k=k,
        beta=0.0,
        v0=v_min,
        v_slope=v_slope,
        f_min=f_min,
        f_max=f_max,
        p_state_step=p_state_step,
        sockets=sockets,
        cores_per_socket=cores_per_socket,
        tdp_w=tdp_w,
    )


def socket_power_w(params: PowerModelParams, f: float, n_active: int) -> float:
    """Power of one socket running ``n_active`` cores at ``f`` GHz.

    An idle socket (``n_active == 0``) is treated as fully off and draws 0 W.
    """
    if not params.f_min - 1e-9 <= f <= params.f_max + 1e-9:
        raise DomainError(f"frequency {f} GHz outside [{params.f_min}, {params.f_max}]")
    if not 0 <= n_active <= params.cores_per_socket:
        raise DomainError(f"n_active={n_active} outside [0, {params.cores_per_socket}]")
    if n_active == 0:
        return 0.0
    v = params.voltage(f)
    return n_active * params.alpha_c * v * v * f + v * params.leakage


@dataclass(frozen=True)
class WorkloadSpec:
    """Synthetic workload.

    ``total_work`` is in giga-operations, ``ipc`` in operations per cycle per
    core and ``mem_bw_cap`` in giga-operations per second per socket
    (``math.inf`` for a workload that never touches memory bandwidth).
    """

    total_work: float
    ipc: float
    mem_bw_cap: float = math.inf
    label: str = "compute_bound"
    name: str = ""

    def __post_init__(self) -> None:
        if not self.total_work > 0:
            raise PreconditionError("total_work must be positive")
        if not self.ipc > 0:
            raise PreconditionError("ipc must be positive")
        if not self.mem_bw_cap > 0:
            raise PreconditionError("mem_bw_cap must be positive")
        if self.label not in ("compute_bound", "memory_bound", "balanced"):
            raise PreconditionError(f"unknown workload label {self.label!r}")


# Sized so a 64-core run at f_max lasts a few simulated seconds.
PRESETS: dict[str, WorkloadSpec] = {
    "compute_bound": WorkloadSpec(
        total_work=1000.0, ipc=1.0, label="compute_bound", name="compute_bound"
    ),
    "memory_bound": WorkloadSpec(
        total_work=560.0, ipc=1.0, mem_bw_cap=70.0, label="memory_bound", name="memory_bound"
    ),
    "balanced": WorkloadSpec(
        total_work=880.0, ipc=1.0, mem_bw_cap=110.0, label="balanced", name="balanced"
    ),
}


def preset(name: str) -> WorkloadSpec:
    try:
        return PRESETS[name]
    except KeyError:
        raise PreconditionError(
            f"unknown workload preset {name!r}; choose from {sorted(PRESETS)}"
        ) from None


def throughput_per_core(spec: WorkloadSpec, f: float, n_active_on_socket: int) -> float:
    """Giga-operations per second retired by one core."""
    compute = spec.ipc * f
    if n_active_on_socket <= 0:
        return compute
    return min(compute, spec.mem_bw_cap / n_active_on_socket)


@dataclass(frozen=True, eq=False)
class SimResult:
    """Outcome of :func:`simulate_run`.

    Per-tick arrays have one row per simulated tick; ``t_end_s[i]`` is the end
    time of tick ``i`` (the final tick may be partial). Columns of the 2-D
    arrays are sockets. Inactive sockets show frequency 0 and power 0.
    """

    cap_w: float
    cores: int
    active_per_socket: tuple[int, ...]
    runtime_s: float
    socket_energy_j: tuple[float, ...]
    stalled_cycles: float
    total_cycles: float
    cap_violation: bool
    t_end_s: np.ndarray = field(repr=False)
    socket_freq_ghz: np.ndarray = field(repr=False)
    socket_power_w: np.ndarray = field(repr=False)
    window_power_w: np.ndarray = field(repr=False)

    @property
    def energy_j(self) -> float:
        return math.fsum(self.socket_energy_j)

    @property
    def mean_stall_ratio(self) -> float:
        if self.total_cycles <= 0:
            return 0.0
        return self.stalled_cycles / self.total_cycles

    @property
    def freq_trace(self) -> list[tuple[float, tuple[float, ...]]]:
        """``(t, per-socket frequency)`` pairs, one per tick."""
        return [(float(t), tuple(float(x) for x in row))
                for t, row in zip(self.t_end_s, self.socket_freq_ghz)]

    def tick_durations_s(self) -> np.ndarray:
        return np.diff(self.t_end_s, prepend=0.0)

    def cumulative_socket_energy_j(self) -> np.ndarray:
        """Energy consumed by each socket up to the end of every tick."""
        return np.cumsum(self.socket_power_w * self.tick_durations_s()[:, None], axis=0)


@dataclass
class _SocketGroup:
    # Sockets with equal active-core counts follow identical trajectories;
    # they are simulated once and weighted by multiplicity.
    n_active: int
    sockets: list[int]
    power: list[float]
    work: list[float]
    stall_rate: list[float]
    cycle_rate: list[float]
    level: int = 0


def simulate_run(
    params: PowerModelParams,
    spec: WorkloadSpec,
    cap_w: float,
    cores: int,
    dt_ms: float = 1.0,
    window_us: int = 999424,
    hysteresis: float = 0.02,
) -> SimResult:
    """Run ``spec`` to completion under a per-socket cap of ``cap_w`` watts.

    Each tick, the limiter of every powered socket computes the budget the next
    sample may draw without pushing the window mean above the cap. If the
    current P-state exceeds it the socket steps down one level; if the next
    level up fits under the budget minus ``hysteresis * cap_w`` it steps up one
    level. A socket that still exceeds its budget at ``f_min`` sets
    ``cap_violation``.

    Before the first tick each socket sits at the highest P-state whose power
    fits the cap, and its window is pre-filled at ``min(cap_w, P(f_max))``,
    i.e. the cap was already in force when the workload started.
    """
    if not cap_w > 0:
        raise PreconditionError("cap_w must be positive")
    if not 1 <= cores <= params.total_cores:
        raise PreconditionError(f"cores must lie in [1, {params.total_cores}]")
    if not dt_ms > 0 or not window_us > 0:
        raise PreconditionError("dt_ms and window_us must be positive")

    ladder = params.ladder()
    top = len(ladder) - 1
    active = params.active_per_socket(cores)
    dt = dt_ms / 1000.0
    n_window = max(1, int(round(window_us / (dt_ms * 1000.0))))
    hyst_w = hysteresis * cap_w
    budget_cap = n_window * cap_w

    groups: dict[int, _SocketGroup] = {}
    for s, n in enumerate(active):
        if n == 0:
            continue
        if n in groups:
            groups[n].sockets.append(s)
            continue
        tput = [n * throughput_per_core(spec, f, n) for f in ladder]
        groups[n] = _SocketGroup(
            n_active=n,
            sockets=[s],
            power=[socket_power_w(params, f, n) for f in ladder],
            work=tput,
            stall_rate=[n * f - w / spec.ipc for f, w in zip(ladder, tput)],
            cycle_rate=[n * f for f in ladder],
        )
    glist = list(groups.values())

    rings: list[list[float]] = []
    sums: list[float] = []
    for g in glist:
        fitting = [i for i, p in enumerate(g.power) if p <= cap_w + _EPS_W]
        g.level = fitting[-1] if fitting else 0
        prefill = min(cap_w, g.power[top])
        rings.append([prefill] * n_window)
        sums.append(prefill * n_window)

    mult = [len(g.sockets) for g in glist]
    n_sockets = params.sockets
    remaining = spec.total_work
    t = 0.0
    idx = 0
    violation = False
    energy = [0.0] * len(glist)
    stalled = 0.0
    total_cyc = 0.0

    t_rec: list[float] = []
    f_rec: list[list[float]] = []
    p_rec: list[list[float]] = []
    w_rec: list[list[float]] = []

    while remaining > 0.0:
        levels = []
        for gi, g in enumerate(glist):
            ring = rings[gi]
            budget = budget_cap - (sums[gi] - ring[idx])
            lvl = g.level
            if g.power[lvl] > budget + _EPS_W:
                if lvl > 0:
                    lvl -= 1
                if lvl == 0 and g.power[0] > budget + _EPS_W:
                    violation = True
            elif lvl < top and g.power[lvl + 1] <= budget - hyst_w + _EPS_W:
                lvl += 1
            g.level = lvl
            levels.append(lvl)

        tick_work = 0.0
        for gi, g in enumerate(glist):
            tick_work += mult[gi] * g.work[levels[gi]]
        tick_work *= dt
        frac = 1.0
        if tick_work >= remaining:
            frac = remaining / tick_work
            remaining = 0.0
        else:
            remaining -= tick_work
        step = frac * dt
        t += step

        f_row = [0.0] * n_sockets
        p_row = [0.0] * n_sockets
        w_row = [0.0] * n_sockets
        for gi, g in enumerate(glist):
            lvl = levels[gi]
            p = g.power[lvl]
            ring = rings[gi]
            sums[gi] += p - ring[idx]
            ring[idx] = p
            energy[gi] += p * step
            stalled += mult[gi] * g.stall_rate[lvl] * step
            total_cyc += mult[gi] * g.cycle_rate[lvl] * step
            mean = sums[gi] / n_window
            for s in g.sockets:
                f_row[s] = ladder[lvl]
                p_row[s] = p
                w_row[s] = mean
        idx += 1
        if idx == n_window:
            idx = 0
        t_rec.append(t)
        f_rec.append(f_row)
        p_rec.append(p_row)
        w_rec.append(w_row)

    socket_energy = [0.0] * n_sockets
    for gi, g in enumerate(glist):
        for s in g.sockets:
            socket_energy[s] = energy[gi]

    return SimResult(
        cap_w=cap_w,
        cores=cores,
        active_per_socket=active,
        runtime_s=t,
        socket_energy_j=tuple(socket_energy),
        stalled_cycles=stalled * 1e9,
        total_cycles=total_cyc * 1e9,
        cap_violation=violation,
        t_end_s=np.asarray(t_rec),
        socket_freq_ghz=np.asarray(f_rec),
        socket_power_w=np.asarray(p_rec),
        window_power_w=np.asarray(w_rec),
    )


def energy_per_work(result: SimResult, spec: WorkloadSpec) -> float:
    """Joules per giga-operation."""
    return result.energy_j / spec.total_work



@dataclass(frozen=True)
class SupplyModel:
    """Wall power seen by an external meter: CPU plus a fixed platform draw,
    divided by power-supply efficiency."""

    platform_w: float = 100.0
    efficiency: float = 0.94

    def __post_init__(self) -> None:
        if self.platform_w < 0 or not 0 < self.efficiency <= 1:
            raise PreconditionError("platform_w must be >= 0 and efficiency in (0, 1]")

    def watts(self, cpu_w: float) -> float:
        return (cpu_w + self.platform_w) / self.efficiency

    def energy_j(self, result: SimResult) -> float:
        return (result.energy_j + self.platform_w * result.runtime_s) / self.efficiency


def to_trace(
    result: SimResult,
    params: PowerModelParams,
    rate_hz: float = 10.0,
    *,
    supply: SupplyModel | None = None,
    counter_offset_uj: int = 0,
    max_energy_range_uj: int = 262143328850,
):
    """Resample a simulation into a telemetry :class:`~capsweep.telemetry.Trace`.

    Samples fall every ``1/rate_hz`` seconds plus one at the end of the run.
    Every online core reports its socket's frequency; RAPL counters start at
    ``counter_offset_uj`` and wrap at ``max_energy_range_uj``.
    """
    from capsweep.powercap_io import ZoneConfig
    from capsweep.telemetry import Sample, Trace
    from capsweep.topology import Topology

    if not rate_hz > 0:
        raise PreconditionError("rate_hz must be positive")
    zones = tuple(
        ZoneConfig(index=s, name=f"package-{s}", enabled=True, max_energy_range_uj=max_energy_range_uj)
        for s in range(params.sockets)
    )
    topo = Topology.contiguous(params.sockets, params.cores_per_socket, zones=zones)
    n_steps = int(math.floor(result.runtime_s * rate_hz + 1e-9))
    times = [k / rate_hz for k in range(n_steps + 1)]
    if result.runtime_s - times[-1] > 1e-9:
        times.append(result.runtime_s)
    t_grid = np.concatenate(([0.0], result.t_end_s))
    cum = np.vstack((np.zeros(params.sockets), result.cumulative_socket_energy_j()))
    n_ticks = len(result.t_end_s)

    samples = []
    for t in times:
        tick = min(int(np.searchsorted(result.t_end_s, t, side="left")), n_ticks - 1)
        freq_row = result.socket_freq_ghz[tick]
        freqs = tuple(
            int(round(freq_row[topo.socket_of[c]] * 1e6)) if c < result.cores else None
            for c in range(topo.n_cores)
        )
        energies = tuple(
            (counter_offset_uj + int(round(float(np.interp(t, t_grid, cum[:, s])) * 1e6)))
            % max_energy_range_uj
            for s in range(params.sockets)
        )
        watts = None
        if supply is not None:
            watts = supply.watts(float(result.socket_power_w[tick].sum()))
        samples.append(Sample(int(round(t * 1e9)), freqs, energies, watts))
    return Trace(samples=tuple(samples), topology=topo, nominal_rate_hz=rate_hz)
