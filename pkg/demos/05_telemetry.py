"""
Telemetry
=========

Sample a fake sysfs tree in the background, then summarise the core
frequencies of a simulated run.
"""

import tempfile
import time
from pathlib import Path

from capsweep import simcpu
from capsweep.fixtures import make_cpu_tree, write_default_fixture
from capsweep.powercap_io import parse_zone_tree
from capsweep.telemetry import freq_distribution, start_sampler, stop_sampler, trace_rapl_energy_j
from capsweep.topology import discover_topology

tmp = Path(tempfile.mkdtemp(prefix="capsweep-telemetry-"))
zones = parse_zone_tree(write_default_fixture(tmp / "powercap"))
topo = discover_topology(make_cpu_tree(tmp / "cpu"), zones)
print(topo.n_cores, "cores on", topo.sockets, "sockets")

handle = start_sampler(topo, rate_hz=50)
time.sleep(0.2)
trace = stop_sampler(handle)
print(len(trace), "samples; first has", len(trace.samples[0].core_freq_khz), "core readings")

# a simulated run turned into the same trace format
params = simcpu.calibrate_defaults()
run = simcpu.simulate_run(params, simcpu.preset("compute_bound"), 90, 48)
sim_trace = simcpu.to_trace(run, params, rate_hz=10)
dist = freq_distribution(sim_trace)
print(dist.n_readings, dist.min_khz, dist.max_khz)
print({p: round(v) for p, v in dist.percentiles.items()})
for lo, hi, count in dist.bins():
    if count:
        print(lo, hi, count)

# per-socket RAPL energy from the wrapped counters matches the simulator
print(trace_rapl_energy_j(sim_trace), run.socket_energy_j)
