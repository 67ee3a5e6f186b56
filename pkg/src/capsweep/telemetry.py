"""Fixed-rate telemetry sampling and trace reductions.

A :class:`Sampler` runs on a background thread and appends one
:class:`Sample` per tick (core frequencies, RAPL counters, external supply
watts, cycle counters). Late ticks are skipped and logged as gaps; nothing is
interpolated. The reductions at the bottom of the module are pure functions.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import shlex
import subprocess
import threading
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from capsweep.errors import (
    EmptyDistribution,
    PreconditionError,
    SamplerStateError,
    SourceUnavailable,
    UndefinedRatio,
)
from capsweep.powercap_io import counter_delta
from capsweep.topology import Topology, parse_cpu_list

LOGGER = logging.getLogger(__name__)

SOURCES = frozenset({"freq", "rapl", "supply", "cycles"})
DEFAULT_RATE_HZ = 10.0


@dataclass(frozen=True)
class CycleCounts:
    stalled: int
    total: int

    def __post_init__(self) -> None:
        if not 0 <= self.stalled <= self.total:
            raise PreconditionError(
                f"cycle counts need 0 <= stalled <= total, got {self.stalled}/{self.total}"
            )

    def __sub__(self, other: "CycleCounts") -> "CycleCounts":
        return CycleCounts(self.stalled - other.stalled, self.total - other.total)


@dataclass(frozen=True)
class Sample:
    """One telemetry tick.

    ``core_freq_khz`` has one entry per logical core (``None`` when offline)
    or is empty when frequencies were not sampled; ``zone_energy_uj`` follows
    the order of ``Topology.zones``.
    """

    t: int
    core_freq_khz: tuple[int | None, ...] = ()
    zone_energy_uj: tuple[int, ...] = ()
    supply_watts: float | None = None
    stalled_cycles: int | None = None
    total_cycles: int | None = None


@dataclass(frozen=True)
class Trace:
    samples: tuple[Sample, ...]
    topology: Topology
    nominal_rate_hz: float = DEFAULT_RATE_HZ
    gaps: tuple[tuple[int, int], ...] = ()  # (t_ns of late tick, ticks missed)

    def __post_init__(self) -> None:
        if not self.nominal_rate_hz > 0:
            raise PreconditionError("nominal_rate_hz must be positive")
        for a, b in zip(self.samples, self.samples[1:]):
            if b.t <= a.t:
                raise PreconditionError("trace timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.samples)


# -- external sources --------------------------------------------------------


def parse_supply_line(line: str) -> tuple[int, float] | None:
    """Parse one ``epoch_ms,watts`` record; blank and ``#`` lines give None."""
    line = line.strip()
    if not line or line.startswith("#"):
        return None
    ms, watts = line.split(",")
    return int(ms), float(watts)


class SupplyFeed:
    """Whole-system power from an external meter (IPMI, PDU, ...).

    Consumes ``epoch_ms,watts`` lines from a command's stdout or from a file
    and keeps the full series. Use as a context manager or call
    :meth:`start`/:meth:`stop`.
    """

    def __init__(self, lines: Callable[[], Iterable[str]], *, closer: Callable[[], None] | None = None):
        self._lines = lines
        self._closer = closer
        self._points: list[tuple[int, float]] = []
        self._lock = threading.Lock()
        self._thread: threading.Thread | None = None
        self._stop = threading.Event()

    @classmethod
    def from_command(cls, argv: Sequence[str] | str) -> "SupplyFeed":
        if isinstance(argv, str):
            argv = shlex.split(argv)
        holder: dict[str, subprocess.Popen] = {}

        def lines():
            proc = subprocess.Popen(list(argv), stdout=subprocess.PIPE, text=True)
            holder["proc"] = proc
            assert proc.stdout is not None
            yield from proc.stdout

        def close():
            proc = holder.get("proc")
            if proc is not None and proc.poll() is None:
                proc.terminate()
                try:
                    proc.wait(timeout=2)
                except subprocess.TimeoutExpired:
                    proc.kill()

        return cls(lines, closer=close)

    @classmethod
    def from_file(cls, path: str | os.PathLike, *, follow: bool = False, poll_s: float = 0.05) -> "SupplyFeed":
        """Read a file of records; with ``follow`` keep reading appended lines."""
        feed: SupplyFeed

        def lines():
            with open(path) as fh:
                while True:
                    line = fh.readline()
                    if line:
                        yield line
                    elif follow and not feed._stop.is_set():
                        time.sleep(poll_s)
                    else:
                        return

        feed = cls(lines)
        return feed

    def _run(self) -> None:
        for line in self._lines():
            if self._stop.is_set():
                break
            try:
                rec = parse_supply_line(line)
            except ValueError:
                LOGGER.warning("skipping malformed supply record %r", line)
                continue
            if rec is None:
                continue
            with self._lock:
                if self._points and rec[0] <= self._points[-1][0]:
                    continue
                self._points.append(rec)

    def start(self) -> "SupplyFeed":
        if self._thread is None:
            self._thread = threading.Thread(target=self._run, name="supply-feed", daemon=True)
            self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._closer is not None:
            self._closer()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def wait_idle(self, timeout: float = 5.0) -> None:
        """Block until a non-following source has been read to the end."""
        if self._thread is not None:
            self._thread.join(timeout=timeout)

    def __enter__(self) -> "SupplyFeed":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def latest(self) -> float | None:
        with self._lock:
            return self._points[-1][1] if self._points else None

    def series(self, t0_ms: int | None = None, t1_ms: int | None = None) -> list[tuple[int, float]]:
        """``(t_ns, watts)`` points with epoch time in ``[t0_ms, t1_ms]``."""
        with self._lock:
            pts = list(self._points)
        return [
            (ms * 1_000_000, w)
            for ms, w in pts
            if (t0_ms is None or ms >= t0_ms) and (t1_ms is None or ms <= t1_ms)
        ]


class CycleCounter(Protocol):
    def read(self) -> CycleCounts:
        """Cumulative system-wide stalled and total cycles."""


class CommandCycleCounter:
    """Cycle counter backed by a command printing ``stalled,total`` totals.

    The last non-empty line of stdout is parsed, so wrappers around
    ``perf stat -x,`` can print diagnostics before it.
    """

    def __init__(self, argv: Sequence[str] | str, timeout_s: float = 30.0) -> None:
        self.argv = shlex.split(argv) if isinstance(argv, str) else list(argv)
        self.timeout_s = timeout_s

    def read(self) -> CycleCounts:
        try:
            out = subprocess.run(
                self.argv, capture_output=True, text=True, check=True, timeout=self.timeout_s
            ).stdout
        except (OSError, subprocess.SubprocessError) as exc:
            raise SourceUnavailable("cycles", str(exc)) from exc
        lines = [ln.strip() for ln in out.splitlines() if ln.strip()]
        if not lines:
            raise SourceUnavailable("cycles", "counter command printed nothing")
        stalled, total = (int(x) for x in lines[-1].split(","))
        return CycleCounts(stalled, total)


# -- sampler -----------------------------------------------------------------


def _read_online(cpu_root: Path, n_cores: int) -> set[int]:
    path = cpu_root / "online"
    if not path.exists():
        return set(range(n_cores))
    return set(parse_cpu_list(path.read_text()))


class Sampler:
    """Background sampler; see :func:`start_sampler`."""

    def __init__(
        self,
        topology: Topology,
        rate_hz: float = DEFAULT_RATE_HZ,
        sources: Iterable[str] = ("freq", "rapl"),
        *,
        supply: SupplyFeed | None = None,
        cycle_counter: CycleCounter | None = None,
    ) -> None:
        if not rate_hz > 0:
            raise PreconditionError("rate_hz must be positive")
        sources = frozenset(sources)
        unknown = sources - SOURCES
        if unknown:
            raise PreconditionError(f"unknown sources {sorted(unknown)}")
        self.topology = topology
        self.rate_hz = float(rate_hz)
        self.sources = sources
        self.supply = supply
        self.cycle_counter = cycle_counter
        self._check_sources()
        self._samples: list[Sample] = []
        self._gaps: list[tuple[int, int]] = []
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._state = "new"
        self._online: set[int] = set()
        self._freq_paths: list[Path | None] = []

    def _check_sources(self) -> None:
        cpu_root = Path(self.topology.cpu_root)
        if "freq" in self.sources:
            if not (cpu_root / "cpu0" / "cpufreq" / "scaling_cur_freq").exists():
                raise SourceUnavailable("freq", f"no scaling_cur_freq under {cpu_root}")
        if "rapl" in self.sources:
            zones = self.topology.zones
            if not zones or any(z.path is None or not (z.path / "energy_uj").exists() for z in zones):
                raise SourceUnavailable("rapl", "topology carries no readable RAPL zones")
        if "supply" in self.sources and self.supply is None:
            raise SourceUnavailable("supply", "no supply adapter configured")
        if "cycles" in self.sources and self.cycle_counter is None:
            raise SourceUnavailable("cycles", "no cycle counter configured")

    def _take(self, t: int) -> Sample:
        freqs: tuple[int | None, ...] = ()
        if "freq" in self.sources:
            vals: list[int | None] = []
            for path in self._freq_paths:
                if path is None:
                    vals.append(None)
                    continue
                try:
                    vals.append(int(path.read_text().strip()))
                except (OSError, ValueError):
                    vals.append(None)
            freqs = tuple(vals)
        energies: tuple[int, ...] = ()
        if "rapl" in self.sources:
            energies = tuple(int((z.path / "energy_uj").read_text().strip()) for z in self.topology.zones)
        supply = self.supply.latest() if "supply" in self.sources else None
        stalled = total = None
        if "cycles" in self.sources:
            c = self.cycle_counter.read()
            stalled, total = c.stalled, c.total
        return Sample(t, freqs, energies, supply, stalled, total)

    def _loop(self) -> None:
        period = 1e9 / self.rate_hz
        next_t = float(time.monotonic_ns())
        while not self._stop.is_set():
            now = time.monotonic_ns()
            if now < next_t:
                self._stop.wait((next_t - now) / 1e9)
                continue
            missed = int((now - next_t) // period)
            if missed:
                self._gaps.append((now, missed))
                next_t += missed * period
            t = time.monotonic_ns()
            if self._samples and t <= self._samples[-1].t:
                t = self._samples[-1].t + 1
            try:
                self._samples.append(self._take(t))
            except Exception:  # keep sampling; a single bad read is a gap
                LOGGER.exception("telemetry read failed")
                self._gaps.append((t, 1))
            next_t += period

    def start(self) -> "Sampler":
        if self._state != "new":
            raise SamplerStateError("sampler already started")
        cpu_root = Path(self.topology.cpu_root)
        self._online = _read_online(cpu_root, self.topology.n_cores)
        self._freq_paths = [
            cpu_root / f"cpu{c}" / "cpufreq" / "scaling_cur_freq" if c in self._online else None
            for c in range(self.topology.n_cores)
        ]
        self._state = "running"
        self._thread = threading.Thread(target=self._loop, name="telemetry-sampler", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> Trace:
        if self._state != "running":
            raise SamplerStateError(f"cannot stop a sampler in state {self._state!r}")
        self._stop.set()
        assert self._thread is not None
        self._thread.join()
        self._state = "stopped"
        return Trace(
            samples=tuple(self._samples),
            topology=self.topology,
            nominal_rate_hz=self.rate_hz,
            gaps=tuple(self._gaps),
        )


def start_sampler(
    topology: Topology,
    rate_hz: float = DEFAULT_RATE_HZ,
    sources: Iterable[str] = ("freq", "rapl"),
    *,
    supply: SupplyFeed | None = None,
    cycle_counter: CycleCounter | None = None,
) -> Sampler:
    """Start sampling ``sources`` at ``rate_hz``.

    Raises:
        PreconditionError: ``rate_hz <= 0`` or an unknown source name.
        SourceUnavailable: a requested source cannot be read.
    """
    return Sampler(topology, rate_hz, sources, supply=supply, cycle_counter=cycle_counter).start()


def stop_sampler(handle: Sampler) -> Trace:
    return handle.stop()


# -- reductions --------------------------------------------------------------


def integrate_power_j(series: Sequence[tuple[int, float]]) -> float:
    """Trapezoidal energy in joules of ``(t_ns, watts)`` points."""
    if len(series) < 2:
        warnings.warn("fewer than 2 power points; energy taken as 0 J", RuntimeWarning, stacklevel=2)
        return 0.0
    terms = []
    for (t0, w0), (t1, w1) in zip(series, series[1:]):
        if t1 <= t0:
            raise PreconditionError("power series timestamps must be strictly increasing")
        terms.append((w0 + w1) * (t1 - t0))
    return math.fsum(terms) / 2e9


def stall_ratio(c: CycleCounts) -> float:
    if c.total == 0:
        raise UndefinedRatio("stall ratio undefined with zero total cycles")
    return c.stalled / c.total


def trace_rapl_energy_j(trace: Trace) -> list[float]:
    """Per-zone energy in joules summed over consecutive counter deltas."""
    zones = trace.topology.zones
    out = []
    for zi, zone in enumerate(zones):
        total = 0
        for a, b in zip(trace.samples, trace.samples[1:]):
            total += counter_delta(a.zone_energy_uj[zi], b.zone_energy_uj[zi], zone.max_energy_range_uj)
        out.append(total / 1e6)
    return out


def supply_series(trace: Trace) -> list[tuple[int, float]]:
    return [(s.t, s.supply_watts) for s in trace.samples if s.supply_watts is not None]


@dataclass(frozen=True)
class FreqDistribution:
    """Summary of all (sample x online core) frequency readings, in kHz."""

    n_readings: int
    min_khz: float
    max_khz: float
    percentiles: dict[float, float]
    bin_edges_khz: tuple[int, ...]
    counts: tuple[int, ...]
    mean_khz: float = field(default=math.nan)

    def bins(self) -> list[tuple[int, int, int]]:
        """``(bin_lo_khz, bin_hi_khz, count)`` rows."""
        e = self.bin_edges_khz
        return [(e[i], e[i + 1], self.counts[i]) for i in range(len(self.counts))]


def distribution_of(
    readings_khz: Iterable[float],
    percentiles: Sequence[float] = (5, 25, 50, 75, 95),
    *,
    bin_width_khz: int = 100_000,
    lo_khz: int = 1_200_000,
    hi_khz: int = 3_900_000,
) -> FreqDistribution:
    """Frequency summary of raw readings; the histogram span grows to fit the data."""
    data = np.asarray([float(x) for x in readings_khz], dtype=float)
    if data.size == 0:
        raise EmptyDistribution("no frequency readings")
    w = bin_width_khz
    lo = min(lo_khz, int(math.floor(data.min() / w)) * w)
    hi = max(hi_khz, int(math.ceil(data.max() / w)) * w)
    edges = np.arange(lo, hi + w, w)
    counts, _ = np.histogram(data, bins=edges)
    pct = {float(p): float(np.percentile(data, p)) for p in percentiles}
    return FreqDistribution(
        n_readings=int(data.size),
        min_khz=float(data.min()),
        max_khz=float(data.max()),
        percentiles=pct,
        bin_edges_khz=tuple(int(x) for x in edges),
        counts=tuple(int(c) for c in counts),
        mean_khz=float(data.mean()),
    )


def freq_distribution(
    trace: Trace, percentiles: Sequence[float] = (5, 25, 50, 75, 95), **histogram
) -> FreqDistribution:
    """Distribution of every online-core frequency reading in ``trace``.

    Linear-interpolated percentiles; histogram bins are 100 MHz wide over
    1.2-3.9 GHz unless overridden (``bin_width_khz``, ``lo_khz``, ``hi_khz``).
    """
    readings = [f for s in trace.samples for f in s.core_freq_khz if f is not None]
    return distribution_of(readings, percentiles, **histogram)


def export_trace_csv(trace: Trace, freq_path: str | os.PathLike, energy_path: str | os.PathLike) -> None:
    """Write ``t_ns,core,freq_khz`` and ``t_ns,zone,energy_uj[,supply_w]`` files."""
    with open(freq_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t_ns", "core", "freq_khz"])
        for s in trace.samples:
            for core, f in enumerate(s.core_freq_khz):
                if f is not None:
                    w.writerow([s.t, core, f])
    has_supply = any(s.supply_watts is not None for s in trace.samples)
    names = [z.name for z in trace.topology.zones]
    with open(energy_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t_ns", "zone", "energy_uj"] + (["supply_w"] if has_supply else []))
        for s in trace.samples:
            for zi, e in enumerate(s.zone_energy_uj):
                row = [s.t, names[zi] if zi < len(names) else zi, e]
                if has_supply:
                    row.append("" if s.supply_watts is None else repr(s.supply_watts))
                w.writerow(row)
