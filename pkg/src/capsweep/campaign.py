"""Measurement campaigns over a (power cap x core count x trial) grid.

A backend knows how to put the machine in a configuration and run one point.
:class:`SysfsBackend` drives the real powercap and cpu-hotplug files (or a
fixture copy of them); :class:`SimBackend` runs the processor simulator.
:func:`run_grid` walks the grid, appends each result to ``results.csv`` as
soon as it is known, skips points already on disk, and always puts the
machine back the way it found it.
"""

from __future__ import annotations

import csv
import errno
import json
import logging
import math
import os
import shutil
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Protocol, Sequence

from capsweep import simcpu
from capsweep.errors import (
    CapsweepError,
    HotplugError,
    PreconditionError,
    VerificationError,
    WorkloadError,
)
from capsweep.powercap_io import (
    counter_delta,
    default_root,
    parse_zone_tree,
    read_energy,
    set_power_limit_watts,
    snapshot_limits,
    write_limits,
)
from capsweep.telemetry import (
    CycleCounter,
    CycleCounts,
    SupplyFeed,
    export_trace_csv,
    integrate_power_j,
    start_sampler,
    stall_ratio,
)
from capsweep.topology import (
    Topology,
    default_cpu_root,
    discover_topology,
    format_cpu_range,
    parse_cpu_list,
)

LOGGER = logging.getLogger(__name__)

DEFAULT_CAPS_W: tuple[int, ...] = tuple(range(70, 181, 10))
DEFAULT_BASELINE = (150, 64)
RESULTS_FILE = "results.csv"
FAILURES_FILE = "failures.csv"
RESULT_COLUMNS = (
    "workload",
    "cap_w",
    "cores",
    "trial",
    "runtime_s",
    "energy_rapl_j",
    "energy_supply_j",
    "stalled_cycles",
    "total_cycles",
    "exit_status",
)


# -- workloads and records ---------------------------------------------------


@dataclass(frozen=True)
class CommandWorkload:
    """A real program. ``{threads}`` in ``argv`` is replaced by the core count."""

    name: str
    argv: tuple[str, ...]
    env: tuple[tuple[str, str], ...] = ()
    workdir: str | None = None

    def resolved_argv(self, threads: int) -> list[str]:
        return [a.replace("{threads}", str(threads)) for a in self.argv]


@dataclass(frozen=True)
class SimWorkload:
    name: str
    spec: simcpu.WorkloadSpec


Workload = CommandWorkload | SimWorkload


@dataclass(frozen=True)
class RunConfig:
    cap_w: int
    cores: int
    workload: str
    trial: int = 1
    threads: int | None = None
    workload_def: Workload | None = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.cap_w < 1:
            raise PreconditionError("cap_w must be >= 1")
        if self.cores < 1:
            raise PreconditionError("cores must be >= 1")
        if self.trial < 1:
            raise PreconditionError("trial indices start at 1")
        if self.threads is None:
            object.__setattr__(self, "threads", self.cores)
        elif self.threads != self.cores:
            raise PreconditionError("thread count must equal the enabled core count")

    @property
    def key(self) -> tuple[str, int, int, int]:
        return (self.workload, self.cap_w, self.cores, self.trial)


@dataclass(frozen=True)
class RunResult:
    config: RunConfig
    runtime_s: float
    energy_rapl_j: float
    energy_supply_j: float | None = None
    cycles: CycleCounts | None = None
    trace_ref: str | None = None
    exit_status: int = 0

    @property
    def ok(self) -> bool:
        return self.exit_status == 0

    @property
    def stall_ratio(self) -> float | None:
        if self.cycles is None or self.cycles.total == 0:
            return None
        return stall_ratio(self.cycles)

    def to_row(self) -> list[str]:
        def num(x):
            return "" if x is None else repr(float(x))

        c = self.config
        return [
            c.workload,
            str(c.cap_w),
            str(c.cores),
            str(c.trial),
            num(self.runtime_s),
            num(self.energy_rapl_j),
            num(self.energy_supply_j),
            "" if self.cycles is None else str(self.cycles.stalled),
            "" if self.cycles is None else str(self.cycles.total),
            str(self.exit_status),
        ]

    @classmethod
    def from_row(cls, row: dict[str, str]) -> "RunResult":
        def opt(x: str) -> float | None:
            return None if x == "" else float(x)

        cycles = None
        if row["stalled_cycles"] != "" and row["total_cycles"] != "":
            cycles = CycleCounts(int(row["stalled_cycles"]), int(row["total_cycles"]))
        return cls(
            config=RunConfig(
                cap_w=int(row["cap_w"]),
                cores=int(row["cores"]),
                workload=row["workload"],
                trial=int(row["trial"]),
            ),
            runtime_s=float(row["runtime_s"]),
            energy_rapl_j=float(row["energy_rapl_j"]),
            energy_supply_j=opt(row["energy_supply_j"]),
            cycles=cycles,
            exit_status=int(row["exit_status"]),
        )


def read_results(path: str | os.PathLike) -> list[RunResult]:
    path = Path(path)
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return [RunResult.from_row(row) for row in csv.DictReader(fh)]


def write_results(results: Iterable[RunResult], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in results:
            w.writerow(r.to_row())


# -- campaign spec -----------------------------------------------------------


@dataclass
class CampaignSpec:
    core_counts: list[int]
    workloads: list[Workload]
    caps_w: list[int] = field(default_factory=lambda: list(DEFAULT_CAPS_W))
    trials: int = 1
    baseline: tuple[int, int] = DEFAULT_BASELINE
    output_dir: Path = Path("results")
    inter_point_delay_s: float = 0.0
    sim: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.output_dir = Path(self.output_dir)
        self.baseline = (int(self.baseline[0]), int(self.baseline[1]))
        if any(c < 1 for c in self.caps_w):
            raise PreconditionError("caps must be >= 1 W")
        if any(n < 1 for n in self.core_counts):
            raise PreconditionError("core counts must be >= 1")
        if self.trials < 0:
            raise PreconditionError("trials must be >= 0")
        if self.baseline[0] not in self.caps_w or self.baseline[1] not in self.core_counts:
            raise PreconditionError(f"baseline {self.baseline} is not a grid cell")
        names = [w.name for w in self.workloads]
        if len(set(names)) != len(names):
            raise PreconditionError("workload names must be unique")

    def points(self) -> Iterator[RunConfig]:
        """Grid in run order: workload, cores descending, caps ascending, trial."""
        for wl in self.workloads:
            for cores in sorted(set(self.core_counts), reverse=True):
                for cap in sorted(set(self.caps_w)):
                    for trial in range(1, self.trials + 1):
                        yield RunConfig(cap, cores, wl.name, trial, workload_def=wl)

    @property
    def results_path(self) -> Path:
        return self.output_dir / RESULTS_FILE


def _parse_caps(raw) -> list[int]:
    if isinstance(raw, dict):
        return list(range(int(raw["start"]), int(raw["stop"]) + 1, int(raw.get("step", 10))))
    return [int(c) for c in raw]


def parse_workload(entry: dict) -> Workload:
    name = entry["name"]
    if "sim" in entry:
        sim = entry["sim"]
        if isinstance(sim, str):
            base = simcpu.preset(sim)
            spec = simcpu.WorkloadSpec(base.total_work, base.ipc, base.mem_bw_cap, base.label, name)
        else:
            sim = dict(sim)
            if sim.get("mem_bw_cap") in (None, "inf"):
                sim["mem_bw_cap"] = math.inf
            spec = simcpu.WorkloadSpec(name=name, **sim)
        return SimWorkload(name, spec)
    if "argv" in entry:
        return CommandWorkload(
            name=name,
            argv=tuple(entry["argv"]),
            env=tuple(sorted((str(k), str(v)) for k, v in entry.get("env", {}).items())),
            workdir=entry.get("workdir"),
        )
    raise PreconditionError(f"workload {name!r} needs either 'sim' or 'argv'")


def campaign_from_dict(data: dict, *, base_dir: Path | None = None) -> CampaignSpec:
    out = Path(data.get("output_dir", "results"))
    if base_dir is not None and not out.is_absolute():
        out = base_dir / out
    return CampaignSpec(
        caps_w=_parse_caps(data.get("caps_w", list(DEFAULT_CAPS_W))),
        core_counts=[int(n) for n in data["core_counts"]],
        trials=int(data.get("trials", 1)),
        baseline=tuple(data.get("baseline", DEFAULT_BASELINE)),
        workloads=[parse_workload(w) for w in data["workloads"]],
        output_dir=out,
        inter_point_delay_s=float(data.get("inter_point_delay_s", 0.0)),
        sim=dict(data.get("sim", {})),
    )


def load_campaign_spec(path: str | os.PathLike) -> CampaignSpec:
    """Load a JSON campaign spec; a relative ``output_dir`` is taken from the
    current directory."""
    with open(path) as fh:
        return campaign_from_dict(json.load(fh))


# -- hotplug -----------------------------------------------------------------


def set_online_cores(
    n: int, topology: Topology | None = None, *, cpu_root: str | os.PathLike | None = None
) -> list[int]:
    """Bring cores ``0..n-1`` online by writing ``"0-<n-1>"`` to ``<cpu_root>/online``.

    Returns the core ids read back from the file.

    Raises:
        PreconditionError: ``n`` outside ``[1, topology.n_cores]``.
        HotplugError: the write was rejected.
        VerificationError: the read-back mask differs from the request.
    """
    if cpu_root is None:
        cpu_root = topology.cpu_root if topology is not None else default_cpu_root()
    if n < 1:
        raise PreconditionError("core 0 cannot be offlined; n must be >= 1")
    if topology is not None and n > topology.n_cores:
        raise PreconditionError(f"n={n} exceeds the {topology.n_cores} cores present")
    path = Path(cpu_root) / "online"
    mask = format_cpu_range(n)
    try:
        path.write_text(mask + "\n")
    except OSError as exc:
        raise HotplugError(f"writing {mask!r} to {path} failed: {exc}") from exc
    applied = parse_cpu_list(path.read_text())
    if applied != list(range(n)):
        raise VerificationError(f"requested cores 0-{n - 1}, {path} reports {applied}")
    return applied


# -- backends ----------------------------------------------------------------


class Backend(Protocol):
    max_cores: int

    def snapshot(self): ...

    def restore(self, state) -> None: ...

    def run_point(self, config: RunConfig) -> RunResult: ...


def _is_permission_error(exc: BaseException) -> bool:
    while exc is not None:
        if isinstance(exc, PermissionError) or getattr(exc, "errno", None) in (errno.EACCES, errno.EPERM):
            return True
        exc = exc.__cause__
    return False


def _window_energy_j(points: Sequence[tuple[int, float]], t0_ns: int, t1_ns: int) -> float | None:
    """Integral of a meter series clipped to ``[t0_ns, t1_ns]``."""
    if len(points) < 2:
        return None

    def at(t: int) -> float:
        for (ta, wa), (tb, wb) in zip(points, points[1:]):
            if ta <= t <= tb:
                return wa + (wb - wa) * (t - ta) / (tb - ta)
        return points[0][1] if t < points[0][0] else points[-1][1]

    inner = [(t, w) for t, w in points if t0_ns < t < t1_ns]
    series = [(t0_ns, at(t0_ns))] + inner + [(t1_ns, at(t1_ns))]
    return integrate_power_j(series)


class SysfsBackend:
    """Runs points on the machine described by a powercap root and a cpu root.

    Pointing both roots at fixture trees gives a side-effect-free backend for
    tests; the code path is the same as on hardware.
    """

    def __init__(
        self,
        powercap_root: str | os.PathLike | None = None,
        cpu_root: str | os.PathLike | None = None,
        *,
        rate_hz: float = 10.0,
        sources: Iterable[str] = ("freq", "rapl"),
        supply: SupplyFeed | None = None,
        cycle_counter: CycleCounter | None = None,
        trace_dir: str | os.PathLike | None = None,
        timeout_s: float | None = None,
    ) -> None:
        self.powercap_root = Path(powercap_root) if powercap_root is not None else default_root()
        self.cpu_root = Path(cpu_root) if cpu_root is not None else default_cpu_root()
        self.rate_hz = rate_hz
        self.sources = set(sources)
        if supply is not None:
            self.sources.add("supply")
        self.supply = supply
        self.cycle_counter = cycle_counter
        self.trace_dir = Path(trace_dir) if trace_dir is not None else None
        self.timeout_s = timeout_s
        self.max_cores = discover_topology(self.cpu_root).n_cores

    def snapshot(self):
        zones = parse_zone_tree(self.powercap_root)
        online = (self.cpu_root / "online").read_text().strip()
        return snapshot_limits(zones), online

    def restore(self, state) -> None:
        limits, online = state
        write_limits(limits)
        (self.cpu_root / "online").write_text(online + "\n")

    def resolve(self, config: RunConfig) -> CommandWorkload:
        wl = config.workload_def
        if not isinstance(wl, CommandWorkload):
            raise WorkloadError(f"{config.workload!r} is not a command workload")
        argv = wl.resolved_argv(config.threads)
        if not argv:
            raise WorkloadError(f"{wl.name!r} has an empty command")
        exe = argv[0]
        if os.sep in exe:
            cwd = Path(wl.workdir) if wl.workdir else Path.cwd()
            target = Path(exe) if Path(exe).is_absolute() else cwd / exe
            if not (target.is_file() and os.access(target, os.X_OK)):
                raise WorkloadError(f"{exe!r} is not an executable file")
        elif shutil.which(exe) is None:
            raise WorkloadError(f"{exe!r} not found on PATH")
        return wl

    def run_point(self, config: RunConfig) -> RunResult:
        wl = self.resolve(config)
        if config.cores > self.max_cores:
            raise PreconditionError(f"{config.cores} cores requested, {self.max_cores} present")

        zones = parse_zone_tree(self.powercap_root)
        set_power_limit_watts(zones, config.cap_w)
        set_online_cores(config.cores, cpu_root=self.cpu_root)
        packages = [z for z in zones if z.is_package and z.enabled]
        topo = discover_topology(self.cpu_root, zones=packages)

        env = dict(os.environ)
        env.update(dict(wl.env))
        env["OMP_NUM_THREADS"] = str(config.threads)
        argv = wl.resolved_argv(config.threads)

        cyc0 = self.cycle_counter.read() if self.cycle_counter is not None else None
        first = [read_energy(z) for z in packages]
        sampler = start_sampler(
            topo, self.rate_hz, self.sources, supply=self.supply, cycle_counter=None
        )
        wall0 = time.time_ns()
        t0 = time.monotonic_ns()
        try:
            proc = subprocess.run(argv, env=env, cwd=wl.workdir, timeout=self.timeout_s)
            status = proc.returncode
        except subprocess.TimeoutExpired:
            status = -9
        except OSError as exc:
            sampler.stop()
            raise WorkloadError(f"cannot launch {argv[0]!r}: {exc}") from exc
        t1 = time.monotonic_ns()
        wall1 = time.time_ns()
        trace = sampler.stop()
        last = [read_energy(z) for z in packages]
        cyc1 = self.cycle_counter.read() if self.cycle_counter is not None else None

        energy_uj = 0
        for zi, zone in enumerate(packages):
            counts = [first[zi].energy_uj]
            counts += [s.zone_energy_uj[zi] for s in trace.samples]
            counts.append(last[zi].energy_uj)
            for a, b in zip(counts, counts[1:]):
                energy_uj += counter_delta(a, b, zone.max_energy_range_uj)

        supply_j = None
        if self.supply is not None:
            supply_j = _window_energy_j(self.supply.series(), wall0, wall1)

        trace_ref = None
        if self.trace_dir is not None:
            self.trace_dir.mkdir(parents=True, exist_ok=True)
            stem = f"{config.workload}_{config.cap_w}W_{config.cores}c_t{config.trial}"
            export_trace_csv(
                trace, self.trace_dir / f"{stem}_freq.csv", self.trace_dir / f"{stem}_energy.csv"
            )
            trace_ref = stem

        if status != 0:
            LOGGER.warning("workload %s exited with status %d", config.workload, status)
        return RunResult(
            config=config,
            runtime_s=(t1 - t0) / 1e9,
            energy_rapl_j=energy_uj / 1e6,
            energy_supply_j=supply_j,
            cycles=(cyc1 - cyc0) if cyc0 is not None and cyc1 is not None else None,
            trace_ref=trace_ref,
            exit_status=status,
        )


class SimBackend:
    """Backend that answers every point with :func:`capsweep.simcpu.simulate_run`.

    It tracks a virtual cap and online-core count so snapshot/restore behave
    like the real thing.
    """

    def __init__(
        self,
        params: simcpu.PowerModelParams | None = None,
        *,
        supply: simcpu.SupplyModel | None = simcpu.SupplyModel(),
        dt_ms: float = 1.0,
        window_us: int = 999424,
        hysteresis: float = 0.02,
        trace_dir: str | os.PathLike | None = None,
    ) -> None:
        self.params = params if params is not None else simcpu.calibrate_defaults()
        self.supply = supply
        self.dt_ms = dt_ms
        self.window_us = window_us
        self.hysteresis = hysteresis
        self.trace_dir = Path(trace_dir) if trace_dir is not None else None
        self.max_cores = self.params.total_cores
        self.cap_w = int(round(self.params.tdp_w))
        self.online = self.max_cores
        self.last_result: simcpu.SimResult | None = None

    @classmethod
    def from_config(cls, cfg: dict, **kwargs) -> "SimBackend":
        cfg = dict(cfg)
        calib_keys = (
            "tdp_w", "sockets", "cores_per_socket", "static_share",
            "v_min", "v_max", "f_min", "f_max", "p_state_step",
        )
        params = simcpu.calibrate_defaults(**{k: cfg.pop(k) for k in calib_keys if k in cfg})
        supply = simcpu.SupplyModel(
            platform_w=float(cfg.pop("platform_w", 100.0)),
            efficiency=float(cfg.pop("psu_efficiency", 0.94)),
        )
        run_keys = ("dt_ms", "window_us", "hysteresis")
        run = {k: cfg.pop(k) for k in run_keys if k in cfg}
        if cfg:
            raise PreconditionError(f"unknown simulator settings {sorted(cfg)}")
        return cls(params, supply=supply, **run, **kwargs)

    def snapshot(self):
        return self.cap_w, self.online

    def restore(self, state) -> None:
        self.cap_w, self.online = state

    def run_point(self, config: RunConfig) -> RunResult:
        wl = config.workload_def
        if not isinstance(wl, SimWorkload):
            raise WorkloadError(f"{config.workload!r} is not a simulator workload")
        if config.cores > self.max_cores:
            raise PreconditionError(f"{config.cores} cores requested, {self.max_cores} simulated")
        self.cap_w = config.cap_w
        self.online = config.cores
        res = simcpu.simulate_run(
            self.params,
            wl.spec,
            config.cap_w,
            config.cores,
            dt_ms=self.dt_ms,
            window_us=self.window_us,
            hysteresis=self.hysteresis,
        )
        self.last_result = res
        trace_ref = None
        if self.trace_dir is not None:
            self.trace_dir.mkdir(parents=True, exist_ok=True)
            stem = f"{config.workload}_{config.cap_w}W_{config.cores}c_t{config.trial}"
            trace = simcpu.to_trace(res, self.params, supply=self.supply)
            export_trace_csv(
                trace, self.trace_dir / f"{stem}_freq.csv", self.trace_dir / f"{stem}_energy.csv"
            )
            trace_ref = stem
        return RunResult(
            config=config,
            runtime_s=res.runtime_s,
            energy_rapl_j=res.energy_j,
            energy_supply_j=self.supply.energy_j(res) if self.supply is not None else None,
            cycles=CycleCounts(int(round(res.stalled_cycles)), int(round(res.total_cycles))),
            trace_ref=trace_ref,
            exit_status=0,
        )


def run_point(config: RunConfig, backend: Backend) -> RunResult:
    return backend.run_point(config)


# -- grid --------------------------------------------------------------------


def _append_row(path: Path, row: Sequence[str], header: Sequence[str]) -> None:
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(header)
        w.writerow(row)
        fh.flush()
        os.fsync(fh.fileno())


def run_grid(spec: CampaignSpec, backend: Backend) -> list[RunResult]:
    """Run every grid point not already in ``spec.results_path``.

    Returns all results on disk for the grid after the run (previous and new).
    Point-level failures go to ``failures.csv`` and are retried on the next
    run; a permission failure aborts the campaign. The pre-campaign machine
    state is restored on every exit path.
    """
    spec.output_dir.mkdir(parents=True, exist_ok=True)
    done = {r.config.key for r in read_results(spec.results_path)}
    pending = [p for p in spec.points() if p.key not in done]
    if pending:
        state = backend.snapshot()
        try:
            for i, config in enumerate(pending):
                if i and spec.inter_point_delay_s > 0:
                    time.sleep(spec.inter_point_delay_s)
                try:
                    result = backend.run_point(config)
                except (CapsweepError, OSError) as exc:
                    if _is_permission_error(exc):
                        raise
                    LOGGER.error("point %s failed: %s", config.key, exc)
                    _append_row(
                        spec.output_dir / FAILURES_FILE,
                        [*map(str, config.key), f"{type(exc).__name__}: {exc}"],
                        ("workload", "cap_w", "cores", "trial", "error"),
                    )
                    backend.restore(state)
                    continue
                _append_row(spec.results_path, result.to_row(), RESULT_COLUMNS)
        finally:
            backend.restore(state)
    keys = {p.key for p in spec.points()}
    return [r for r in read_results(spec.results_path) if r.config.key in keys]
