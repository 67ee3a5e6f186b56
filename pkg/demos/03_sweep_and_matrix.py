"""
A cap x core sweep and its efficiency matrix
============================================

Run a simulated grid, normalise against the (150 W, 64 cores) baseline and
look for the cheapest configuration that stays within 5% of its runtime.
"""

import tempfile
from pathlib import Path

import numpy as np

from capsweep import simcpu
from capsweep.analysis import best_tradeoff, build_matrix, export_matrix_csv, stall_range
from capsweep.campaign import CampaignSpec, SimBackend, SimWorkload, run_grid

out = Path(tempfile.mkdtemp(prefix="capsweep-sweep-"))
spec = CampaignSpec(
    core_counts=[16, 32, 48, 64],
    workloads=[SimWorkload("mem", simcpu.preset("memory_bound"))],
    output_dir=out,
)
results = run_grid(spec, SimBackend())
print(len(results), "runs written to", spec.results_path)

energy = build_matrix(results, "energy_rapl", (150, 64))
runtime = build_matrix(results, "runtime", (150, 64))

np.set_printoptions(precision=3, suppress=True)
print("cores ", energy.core_counts)
for cap, row in zip(energy.caps_w, energy.values):
    print(f"{cap:4d} W", row)

best = best_tradeoff(energy, runtime, 0.05)
print(best)

# stall ratio climbs with the cap for memory-bound code
sr = stall_range(results, workload="mem")
print(sr.min_ratio, sr.max_ratio)

export_matrix_csv(energy, out / "mem_energy_matrix.csv")
print((out / "mem_energy_matrix.csv").read_text().splitlines()[:4])

# rerunning the same grid is a no-op: results on disk are reused
again = run_grid(spec, SimBackend())
print(len(again) == len(results))
