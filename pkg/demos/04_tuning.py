"""
Choosing a cap
==============

The 80%-of-TDP rule of thumb against a measured search, with and without a
runtime budget.
"""

from capsweep import simcpu
from capsweep.tuner import golden_section_cap, max_gss_evaluations, rule_of_thumb_cap, tune

params = simcpu.calibrate_defaults()
print("rule of thumb:", rule_of_thumb_cap(150), "W")


def runner(spec):
    def run(cap):
        r = simcpu.simulate_run(params, spec, cap, 64)
        return r.energy_j, r.runtime_s
    return run


cpu = simcpu.preset("compute_bound")

# plain search on energy; compare with a brute-force scan
res = golden_section_cap(lambda c: runner(cpu)(c)[0], 70, 180, 5)
scan = {c: runner(cpu)(c)[0] for c in range(70, 181)}
print(res.recommended_cap_w, min(scan, key=scan.get))
print(len(res.evaluations), "evaluations, bound", max_gss_evaluations(70, 180, 5))

# no budget: the energy optimum; 5% budget: runtime matters for compute-bound code
for budget in (float("inf"), 0.05):
    t = tune(runner(cpu), 70, 180, budget)
    print(budget, t.recommended_cap_w, t.perf_loss_vs_reference)

# memory-bound code gives up very little runtime for a deep cap
t = tune(runner(simcpu.preset("memory_bound")), 70, 180, 0.05)
print(t.recommended_cap_w, round(t.perf_loss_vs_reference, 4), t.method)
for cap, e, rt in sorted(t.evaluations):
    print(cap, round(e), round(rt, 3))
