"""Logical-core topology and the sysfs cpu range-list format."""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from pathlib import Path

from capsweep.errors import ParseError, PreconditionError

DEFAULT_CPU_ROOT = Path("/sys/devices/system/cpu")
CPU_ROOT_ENV_VAR = "CAPSWEEP_CPU_ROOT"

_CPU_DIR_RE = re.compile(r"^cpu(\d+)$")


def default_cpu_root() -> Path:
    env = os.environ.get(CPU_ROOT_ENV_VAR)
    return Path(env) if env else DEFAULT_CPU_ROOT


@dataclass(frozen=True)
class Topology:
    """Logical cores, the socket each belongs to, and the RAPL zones to read.

    ``zones`` holds :class:`capsweep.powercap_io.ZoneConfig` objects.
    """

    n_cores: int
    socket_of: tuple[int, ...]
    zones: tuple = ()
    cpu_root: Path = field(default=DEFAULT_CPU_ROOT, compare=False)

    def __post_init__(self) -> None:
        if self.n_cores < 1:
            raise PreconditionError("topology needs at least one core")
        if len(self.socket_of) != self.n_cores:
            raise PreconditionError("socket_of must list one socket per core")

    @classmethod
    def contiguous(cls, sockets: int, cores_per_socket: int, **kwargs) -> "Topology":
        socket_of = tuple(s for s in range(sockets) for _ in range(cores_per_socket))
        return cls(n_cores=sockets * cores_per_socket, socket_of=socket_of, **kwargs)

    @property
    def sockets(self) -> int:
        return len(set(self.socket_of))

    def sockets_powered(self, cores: int) -> int:
        """Distinct sockets touched by the contiguous mask ``0..cores-1``."""
        return len(set(self.socket_of[:cores]))


def parse_cpu_list(text: str) -> list[int]:
    """Parse ``"0-3,8,10-11"`` into a sorted list of core ids."""
    text = text.strip()
    if not text:
        return []
    cores: set[int] = set()
    for part in text.split(","):
        part = part.strip()
        m = re.fullmatch(r"(\d+)(?:-(\d+))?", part)
        if not m:
            raise ParseError("<cpu list>", text)
        lo = int(m.group(1))
        hi = int(m.group(2)) if m.group(2) is not None else lo
        if hi < lo:
            raise ParseError("<cpu list>", text)
        cores.update(range(lo, hi + 1))
    return sorted(cores)


def format_cpu_range(n: int) -> str:
    """Range string for the contiguous mask of ``n`` cores: ``"0"`` or ``"0-<n-1>"``."""
    if n < 1:
        raise PreconditionError("at least core 0 must stay online")
    return "0" if n == 1 else f"0-{n - 1}"


def discover_topology(cpu_root: str | os.PathLike | None = None, zones=()) -> Topology:
    """Count ``cpuN`` directories and read each core's physical package id.

    Cores without a ``topology/physical_package_id`` file (offline cores on
    some kernels) inherit the socket of the previous core.
    """
    root = Path(cpu_root) if cpu_root is not None else default_cpu_root()
    ids = sorted(
        int(m.group(1)) for m in (_CPU_DIR_RE.match(p.name) for p in root.iterdir()) if m
    )
    if not ids:
        raise PreconditionError(f"no cpuN directories under {root}")
    socket_of = []
    last = 0
    for cpu in ids:
        pkg = root / f"cpu{cpu}" / "topology" / "physical_package_id"
        if pkg.exists():
            last = int(pkg.read_text().strip())
        socket_of.append(last)
    return Topology(n_cores=len(ids), socket_of=tuple(socket_of), zones=tuple(zones), cpu_root=root)
