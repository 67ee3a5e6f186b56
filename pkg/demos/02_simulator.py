"""
The simulated server
====================

A dual-socket machine with a per-socket power model and a RAPL-style
limiter. Useful for trying sweeps without hardware.
"""

from capsweep import simcpu

params = simcpu.calibrate_defaults()
print(params)

# socket power across the frequency ladder with every core busy
for f in params.ladder()[::4]:
    print(f"{f:.1f} GHz  {simcpu.socket_power_w(params, f, params.cores_per_socket):6.1f} W")

cpu = simcpu.preset("compute_bound")
mem = simcpu.preset("memory_bound")

# compute-bound work slows down as the cap drops; memory-bound work barely does
for cap in (70, 90, 120, 150):
    a = simcpu.simulate_run(params, cpu, cap, 64)
    b = simcpu.simulate_run(params, mem, cap, 64)
    print(cap, round(a.runtime_s, 2), round(a.energy_j), "|", round(b.runtime_s, 2), round(b.energy_j))

# waking the second socket for one extra core costs its idle leakage
for cores in (32, 33):
    r = simcpu.simulate_run(params, cpu, 120, cores)
    print(cores, r.active_per_socket, simcpu.energy_per_work(r, cpu))

# the limiter keeps the trailing window mean under the cap
r = simcpu.simulate_run(params, cpu, 100, 64)
print(r.cap_violation, r.window_power_w.max(axis=0))
