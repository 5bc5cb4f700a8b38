"""
A noisy neighbor moves the coarse estimate, not the fine one
============================================================

The same target application runs twice on a synthetic 2x16 host: alone,
then beside an identical neighbor. The generator knows each task's true
energy, so we can see which estimate follows the target and which follows
the host.
"""

import math

from numawatt import oracle
from numawatt.engine import ALL_JOBS, Engine, EngineConfig

DURATION = 10.0

alone = oracle.simulate(oracle.preset("mix", duration=DURATION))
shared = oracle.simulate(oracle.preset("mix-neighbor", duration=DURATION))
target = f"pid:{alone.truth.app_roots()['target']}"


def target_records(sim):
    cfg = EngineConfig(targets=ALL_JOBS, static_mode="excluded", static_power=sim.scenario.static_power)
    return [r for res in Engine(cfg, sim.topology).run(sim.frames) for r in res.records if r.app == target]


a = target_records(alone)
b = target_records(shared)

# the neighbor doubles each socket's busy time, so the target's credit halves
print("socket 0 cpu credit, first interval: "
      f"alone {a[0].per_socket[0].cpu.credit:.3f}, shared {b[0].per_socket[0].cpu.credit:.3f}")

# ...while the dynamic energy it is applied to doubles
fine_a = math.fsum(r.cpu_dynamic for r in a)
fine_b = math.fsum(r.cpu_dynamic for r in b)
print(f"fine-grained cpu energy: alone {fine_a:8.3f} J, shared {fine_b:8.3f} J")

# the coarse baseline splits the whole package, static included, by host-wide share
coarse_a = math.fsum(r.coarse_cpu for r in a)
coarse_b = math.fsum(r.coarse_cpu for r in b)
print(f"coarse cpu energy:       alone {coarse_a:8.3f} J, shared {coarse_b:8.3f} J "
      f"({100 * (coarse_b - coarse_a) / coarse_a:+.1f}%)")

truth = math.fsum(alone.truth.task_cpu(label).sum() for label in alone.truth.apps()["target"])
print(f"generator truth:         {truth:8.3f} J in both runs")
