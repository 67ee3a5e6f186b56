"""Read and write the Linux powercap (intel-rapl) sysfs tree.

Every function takes the tree root explicitly, so the same code runs against
``/sys/class/powercap/intel-rapl`` and against a fixture directory built by
:func:`write_zone_tree`.

Layout::

    <root>/intel-rapl:<N>/name
    <root>/intel-rapl:<N>/enabled
    <root>/intel-rapl:<N>/energy_uj
    <root>/intel-rapl:<N>/max_energy_range_uj
    <root>/intel-rapl:<N>/constraint_<K>_{name,power_limit_uw,time_window_us,max_power_uw}
    <root>/intel-rapl:<N>/intel-rapl:<N>:<M>/...    (subzones, e.g. dram)
"""

from __future__ import annotations

import logging
import os
import re
import time
from dataclasses import dataclass, field
from pathlib import Path

from capsweep.errors import (
    ParseError,
    PartialWriteError,
    PowercapIOError,
    PreconditionError,
    ZoneNotFoundError,
)

LOGGER = logging.getLogger(__name__)

DEFAULT_ROOT = Path("/sys/class/powercap/intel-rapl")
ROOT_ENV_VAR = "CAPSWEEP_POWERCAP_ROOT"
KNOWN_CONSTRAINTS = ("long_term", "short_term")

_ZONE_RE = re.compile(r"^intel-rapl:(\d+(?::\d+)*)$")
_CONSTRAINT_RE = re.compile(r"^constraint_(\d+)_name$")


def default_root() -> Path:
    """Powercap root, honouring the ``CAPSWEEP_POWERCAP_ROOT`` override."""
    env = os.environ.get(ROOT_ENV_VAR)
    return Path(env) if env else DEFAULT_ROOT


@dataclass(frozen=True)
class ConstraintConfig:
    name: str
    power_limit_uw: int
    time_window_us: int
    max_power_uw: int | None = None

    def __post_init__(self) -> None:
        if self.power_limit_uw < 0:
            raise PreconditionError("power_limit_uw must be >= 0")
        if self.time_window_us <= 0:
            raise PreconditionError("time_window_us must be > 0")

    @property
    def known(self) -> bool:
        """False for constraint names other than long_term/short_term."""
        return self.name in KNOWN_CONSTRAINTS


@dataclass(frozen=True)
class ZoneConfig:
    """One powercap zone with its constraints and nested subzones.

    ``path`` is where the zone was read from (or should be written to); it
    is excluded from equality so parsed trees compare by content.
    """

    index: int
    name: str
    enabled: bool
    max_energy_range_uj: int
    constraints: tuple[ConstraintConfig, ...] = ()
    subzones: tuple["ZoneConfig", ...] = ()
    path: Path | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.enabled and self.max_energy_range_uj <= 0:
            raise PreconditionError("enabled zones need max_energy_range_uj > 0")

    @property
    def is_package(self) -> bool:
        return self.name.startswith("package")


@dataclass(frozen=True)
class EnergyReading:
    zone_index: int
    energy_uj: int
    timestamp: int  # time.monotonic_ns()


@dataclass
class WriteReport:
    """Writes performed (or planned, for a dry run) by a cap change."""

    writes: list[tuple[Path, str]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    dry_run: bool = False

    def __iter__(self):
        return iter(self.writes)

    def __len__(self) -> int:
        return len(self.writes)


def _read_text(path: Path) -> str:
    try:
        return path.read_text()
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise PowercapIOError(f"cannot read {path}: {exc}") from exc


def _read_uint(path: Path) -> int:
    raw = _read_text(path)
    text = raw.strip()
    if not text.isdigit():
        raise ParseError(path, raw)
    return int(text)


def _read_optional_uint(path: Path) -> int | None:
    if not path.exists():
        return None
    return _read_uint(path)


def _zone_sort_key(p: Path) -> tuple[int, ...]:
    m = _ZONE_RE.match(p.name)
    assert m is not None
    return tuple(int(x) for x in m.group(1).split(":"))


def _zone_dirs(parent: Path, depth: int) -> list[Path]:
    out = []
    for entry in parent.iterdir():
        m = _ZONE_RE.match(entry.name)
        if m and entry.is_dir() and m.group(1).count(":") == depth:
            out.append(entry)
    return sorted(out, key=_zone_sort_key)


def _parse_constraints(zone_dir: Path) -> tuple[ConstraintConfig, ...]:
    indices = sorted(
        int(m.group(1))
        for m in (_CONSTRAINT_RE.match(p.name) for p in zone_dir.iterdir())
        if m
    )
    constraints = []
    for k in indices:
        prefix = f"constraint_{k}_"
        name = _read_text(zone_dir / f"{prefix}name").strip()
        c = ConstraintConfig(
            name=name,
            power_limit_uw=_read_uint(zone_dir / f"{prefix}power_limit_uw"),
            time_window_us=_read_uint(zone_dir / f"{prefix}time_window_us"),
            max_power_uw=_read_optional_uint(zone_dir / f"{prefix}max_power_uw"),
        )
        if not c.known:
            LOGGER.warning("unknown constraint name %r in %s", name, zone_dir)
        constraints.append(c)
    return tuple(constraints)


def _parse_zone(zone_dir: Path, index: int, depth: int) -> ZoneConfig:
    enabled_raw = _read_text(zone_dir / "enabled")
    if enabled_raw.strip() not in ("0", "1"):
        raise ParseError(zone_dir / "enabled", enabled_raw)
    subzones = tuple(
        _parse_zone(sub, _zone_sort_key(sub)[-1], depth + 1)
        for sub in _zone_dirs(zone_dir, depth + 1)
    )
    return ZoneConfig(
        index=index,
        name=_read_text(zone_dir / "name").strip(),
        enabled=enabled_raw.strip() == "1",
        max_energy_range_uj=_read_uint(zone_dir / "max_energy_range_uj"),
        constraints=_parse_constraints(zone_dir),
        subzones=subzones,
        path=zone_dir,
    )


def parse_zone_tree(root: str | os.PathLike | None = None) -> list[ZoneConfig]:
    """Parse every top-level zone under ``root`` (subzones nested).

    Raises:
        ZoneNotFoundError: ``root`` does not exist.
        ParseError: an attribute file does not hold a non-negative integer.
    """
    root = Path(root) if root is not None else default_root()
    if not root.is_dir():
        raise ZoneNotFoundError(f"powercap root not found: {root}")
    zones = []
    for zone_dir in _zone_dirs(root, 0):
        zones.append(_parse_zone(zone_dir, _zone_sort_key(zone_dir)[-1], 0))
    return zones


def _write_attr(path: Path, value: int | str) -> None:
    path.write_text(f"{value}\n")


def write_zone_tree(zones: list[ZoneConfig], root: str | os.PathLike) -> Path:
    """Materialise ``zones`` as a powercap-shaped directory tree.

    Used to build fixtures; ``energy_uj`` is created as ``0`` when absent.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)

    def write(zone: ZoneConfig, parent: Path, prefix: str) -> None:
        zdir = parent / f"{prefix}:{zone.index}"
        zdir.mkdir(exist_ok=True)
        _write_attr(zdir / "name", zone.name)
        _write_attr(zdir / "enabled", int(zone.enabled))
        _write_attr(zdir / "max_energy_range_uj", zone.max_energy_range_uj)
        if not (zdir / "energy_uj").exists():
            _write_attr(zdir / "energy_uj", 0)
        for k, c in enumerate(zone.constraints):
            _write_attr(zdir / f"constraint_{k}_name", c.name)
            _write_attr(zdir / f"constraint_{k}_power_limit_uw", c.power_limit_uw)
            _write_attr(zdir / f"constraint_{k}_time_window_us", c.time_window_us)
            if c.max_power_uw is not None:
                _write_attr(zdir / f"constraint_{k}_max_power_uw", c.max_power_uw)
        for sub in zone.subzones:
            write(sub, zdir, zdir.name)

    for zone in zones:
        write(zone, root, "intel-rapl")
    return root


def cap_targets(zones: list[ZoneConfig]) -> list[tuple[ZoneConfig, int, ConstraintConfig]]:
    """``(zone, constraint index, constraint)`` for every cappable constraint.

    Only top-level package zones are capped, and only their long_term and
    short_term constraints. DRAM subzones are never touched.
    """
    out = []
    for zone in zones:
        if not zone.is_package:
            continue
        for k, c in enumerate(zone.constraints):
            if c.known:
                out.append((zone, k, c))
    return out


def set_power_limit_watts(
    zones: list[ZoneConfig], watts: int, *, dry_run: bool = False
) -> WriteReport:
    """Set long_term and short_term limits of every package zone to ``watts``.

    Writes ``watts * 1_000_000`` followed by a newline, in zone then
    constraint order. A limit above a constraint's ``max_power_uw`` is still
    written but noted in ``report.warnings``.

    Raises:
        PreconditionError: ``watts < 1``.
        PartialWriteError: a write failed; ``succeeded`` lists what landed.
    """
    if isinstance(watts, bool) or int(watts) != watts or watts < 1:
        raise PreconditionError(f"power limit must be a whole number of watts >= 1, got {watts!r}")
    value = str(int(watts) * 1_000_000)
    report = WriteReport(dry_run=dry_run)
    for zone, k, c in cap_targets(zones):
        if zone.path is None:
            raise PreconditionError(f"zone {zone.name} has no filesystem path")
        path = zone.path / f"constraint_{k}_power_limit_uw"
        if c.max_power_uw is not None and int(value) > c.max_power_uw:
            msg = (
                f"{zone.name} {c.name}: {watts} W exceeds max_power_uw "
                f"{c.max_power_uw}"
            )
            LOGGER.warning(msg)
            report.warnings.append(msg)
        if not dry_run:
            try:
                _write_attr(path, value)
            except OSError as exc:
                raise PartialWriteError(path, report.writes, exc) from exc
        report.writes.append((path, value))
    return report


def write_limits(writes: list[tuple[Path, str]]) -> None:
    """Write raw ``(path, value)`` pairs, e.g. to roll back a partial write."""
    done: list[tuple[Path, str]] = []
    for path, value in writes:
        try:
            _write_attr(Path(path), value)
        except OSError as exc:
            raise PartialWriteError(path, done, exc) from exc
        done.append((Path(path), value))


def snapshot_limits(zones: list[ZoneConfig]) -> list[tuple[Path, str]]:
    """Current on-disk value of every cappable constraint, for later restore."""
    out = []
    for zone, k, _ in cap_targets(zones):
        path = zone.path / f"constraint_{k}_power_limit_uw"
        out.append((path, str(_read_uint(path))))
    return out


def read_energy(zone: ZoneConfig) -> EnergyReading:
    """Read the zone's wrapping ``energy_uj`` counter.

    The timestamp is the midpoint of monotonic clock reads taken just before
    and after the file read.
    """
    if zone.path is None:
        raise PreconditionError(f"zone {zone.name} has no filesystem path")
    path = zone.path / "energy_uj"
    before = time.monotonic_ns()
    try:
        raw = path.read_text()
    except OSError as exc:
        raise PowercapIOError(f"cannot read {path}: {exc}") from exc
    after = time.monotonic_ns()
    text = raw.strip()
    if not text.isdigit():
        raise ParseError(path, raw)
    return EnergyReading(zone.index, int(text), (before + after) // 2)


def counter_delta(prev_uj: int, curr_uj: int, max_range_uj: int) -> int:
    """Counter difference allowing for at most one wrap at ``max_range_uj``."""
    if curr_uj >= prev_uj:
        return curr_uj - prev_uj
    return curr_uj + max_range_uj - prev_uj


def energy_delta_uj(prev: EnergyReading, curr: EnergyReading, max_range_uj: int) -> int:
    return counter_delta(prev.energy_uj, curr.energy_uj, max_range_uj)


def format_zone_tree(zones: list[ZoneConfig]) -> str:
    """Render zones in the indented ``Zone N / Constraint K / Subzone M`` layout."""
    lines: list[str] = []

    def emit(zone: ZoneConfig, label: str, indent: int) -> None:
        pad = " " * indent
        lines.append(f"{pad}{label} {zone.index}")
        pad2 = pad + "  "
        lines.append(f"{pad2}name: {zone.name}")
        lines.append(f"{pad2}enabled: {int(zone.enabled)}")
        lines.append(f"{pad2}max_energy_range_uj: {zone.max_energy_range_uj}")
        for k, c in enumerate(zone.constraints):
            lines.append(f"{pad2}Constraint {k}")
            lines.append(f"{pad2}  name: {c.name}")
            lines.append(f"{pad2}  power_limit_uw: {c.power_limit_uw}")
            lines.append(f"{pad2}  time_window_us: {c.time_window_us}")
            if c.max_power_uw is not None:
                lines.append(f"{pad2}  max_power_uw: {c.max_power_uw}")
        for sub in zone.subzones:
            emit(sub, "Subzone", indent + 2)

    for zone in zones:
        emit(zone, "Zone", 0)
    return "\n".join(lines) + ("\n" if lines else "")


def zone_to_dict(zone: ZoneConfig) -> dict:
    return {
        "index": zone.index,
        "name": zone.name,
        "enabled": zone.enabled,
        "max_energy_range_uj": zone.max_energy_range_uj,
        "constraints": [
            {
                "name": c.name,
                "power_limit_uw": c.power_limit_uw,
                "time_window_us": c.time_window_us,
                "max_power_uw": c.max_power_uw,
            }
            for c in zone.constraints
        ],
        "subzones": [zone_to_dict(s) for s in zone.subzones],
        "path": str(zone.path) if zone.path is not None else None,
    }
