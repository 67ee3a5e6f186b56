"""Builders for sysfs-shaped fixture trees.

``default_rapl_zones`` is the stock RAPL configuration of a dual-socket 150 W TDP
server: two package zones, each capped at 150 W long-term / 180 W short-term,
with a disabled DRAM subzone.
"""

from __future__ import annotations

import os
from pathlib import Path

from capsweep.powercap_io import ConstraintConfig, ZoneConfig, write_zone_tree
from capsweep.topology import format_cpu_range

PACKAGE_MAX_ENERGY_RANGE_UJ = 262143328850
DRAM_MAX_ENERGY_RANGE_UJ = 65712999613


def default_rapl_zones() -> list[ZoneConfig]:
    def package(i: int) -> ZoneConfig:
        dram = ZoneConfig(
            index=0,
            name="dram",
            enabled=False,
            max_energy_range_uj=DRAM_MAX_ENERGY_RANGE_UJ,
            constraints=(ConstraintConfig("long_term", 0, 976, 41250000),),
        )
        return ZoneConfig(
            index=i,
            name=f"package-{i}",
            enabled=True,
            max_energy_range_uj=PACKAGE_MAX_ENERGY_RANGE_UJ,
            constraints=(
                ConstraintConfig("long_term", 150000000, 999424, 150000000),
                ConstraintConfig("short_term", 180000000, 1952, 376000000),
            ),
            subzones=(dram,),
        )

    return [package(0), package(1)]


def write_default_fixture(root: str | os.PathLike) -> Path:
    return write_zone_tree(default_rapl_zones(), root)


def make_cpu_tree(
    root: str | os.PathLike,
    n_cores: int = 64,
    *,
    cores_per_socket: int = 32,
    freq_khz: int = 3900000,
) -> Path:
    """Fake ``/sys/devices/system/cpu`` with all cores online."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for cpu in range(n_cores):
        d = root / f"cpu{cpu}"
        (d / "cpufreq").mkdir(parents=True, exist_ok=True)
        (d / "topology").mkdir(exist_ok=True)
        (d / "cpufreq" / "scaling_cur_freq").write_text(f"{freq_khz}\n")
        (d / "topology" / "physical_package_id").write_text(f"{cpu // cores_per_socket}\n")
    (root / "online").write_text(format_cpu_range(n_cores) + "\n")
    return root
