"""
Reading and writing a powercap tree
===================================

Everything here runs against a throwaway copy of a dual-socket RAPL tree,
so no root access is needed.
"""

import tempfile
from pathlib import Path

from capsweep.fixtures import write_default_fixture
from capsweep import powercap_io as pc

tmp = Path(tempfile.mkdtemp(prefix="capsweep-demo-"))
root = write_default_fixture(tmp / "powercap")

# parse the tree and print it the way the `zones` subcommand does
zones = pc.parse_zone_tree(root)
print(pc.format_zone_tree(zones))

# the cappable constraints: long_term and short_term of each package
for zone, k, c in pc.cap_targets(zones):
    print(zone.name, k, c.name, c.power_limit_uw)

# a dry run reports the writes without touching anything
report = pc.set_power_limit_watts(zones, 120, dry_run=True)
for path, value in report:
    print("would write", path.relative_to(root), "->", value)

# snapshot, cap at 120 W, then roll back
saved = pc.snapshot_limits(zones)
pc.set_power_limit_watts(zones, 120)
print([c.power_limit_uw for z in pc.parse_zone_tree(root) for c in z.constraints])
pc.write_limits(saved)
print([c.power_limit_uw for z in pc.parse_zone_tree(root) for c in z.constraints])

# energy_uj wraps at max_energy_range_uj; deltas account for it
top = zones[0].max_energy_range_uj
print(pc.counter_delta(top - 10, 5, top))
