"""
Validation by summation, and what a missing job looks like
==========================================================

If every job on a host is attributed, the attributed energies plus the
static energy (counted once) must add up to what RAPL measured. Here we
check that on a synthetic trace written to disk, then leave one
application out and watch the residual appear.
"""

import math
import tempfile
from pathlib import Path

from numawatt import oracle
from numawatt.engine import ALL_JOBS, Engine, EngineConfig, validate_by_summation
from numawatt.telemetry import TraceReader

out = Path(tempfile.mkdtemp(prefix="numawatt-demo-"))
summary = oracle.generate_trace(oracle.preset("mix-neighbor", duration=5.0, seed=1), out)
print(f"{summary.frames} frames, {summary.tasks} tasks in {summary.apps} applications -> {summary.trace_path}")

with TraceReader.open(summary.trace_path) as reader:
    topo = reader.topology
    frames = list(reader)
truth = oracle.GroundTruth.read(summary.truth_path)


def closure(targets):
    cfg = EngineConfig(targets=targets, static_mode="apportioned", static_power=truth.static_power)
    return validate_by_summation(Engine(cfg, topo).run(frames))


full = closure(ALL_JOBS)
print(f"all jobs:    max interval error cpu {full.max_interval_error('cpu'):.1e}, "
      f"dram {full.max_interval_error('dram'):.1e}")

# attribute the target only; the neighbor's dynamic energy is now unaccounted for
only_target = closure([truth.app_roots()["target"]])
residual = math.fsum(r.measured - r.attributed for r in only_target.device_rows("cpu"))
neighbor = math.fsum(truth.task_cpu(label).sum() for label in truth.apps()["neighbor"])
print(f"target only: max interval error cpu {only_target.max_interval_error('cpu'):.1%}, "
      f"{len(only_target.incomplete)} rows flagged incomplete")
print(f"cpu residual {residual:.3f} J, neighbor's true cpu energy {neighbor:.3f} J")

# the same check from the command line:
print(f"\n  numawatt validate --trace {summary.trace_path} --truth {summary.truth_path}")
