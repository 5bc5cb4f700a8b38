import hashlib
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from numawatt import oracle
from numawatt.engine import ALL_JOBS, ALL_TASKS, Engine, EngineConfig
from numawatt.errors import ScenarioInvalid
from numawatt.model import ModelParams
from numawatt.oracle import GIB, LabelMismatch, Scenario, TaskSpec
from numawatt.telemetry import PACKAGE, TraceReader, Topology, delta_uj_with_overflow


def _one_cpu_per_socket(tasks, duration=1.0, period=0.01, **kw):
    base = dict(
        topology=Topology.uniform(2, 1, 100), duration=duration, frame_period=period,
        static_power=[(10.0, 0.0), (10.0, 0.0)], dyn_cpu_coeff=[40.0, 40.0], dyn_dram_coeff=[0.0, 0.0],
        node_mem_total=[GIB, GIB], tasks=tasks, name="half",
    )
    base.update(kw)
    return Scenario(**base)


def _counter_total(frames, socket, domain):
    total = 0
    for a, b in zip(frames, frames[1:]):
        ra, rb = a.rapl_map()[(socket, domain)], b.rapl_map()[(socket, domain)]
        total += delta_uj_with_overflow(ra.uj, rb.uj, rb.max_uj)
    return total


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


# --- generative model ---------------------------------------------------------------

def test_half_busy_task_closed_form():
    sc = _one_cpu_per_socket([TaskSpec("t", cpu_schedule=[(0.0, (0.5, 0.0))])])
    sim = oracle.simulate(sc)
    assert len(sim.frames) == 101
    assert _counter_total(sim.frames, 0, PACKAGE) == 30_000_000
    assert _counter_total(sim.frames, 1, PACKAGE) == 10_000_000
    assert sim.truth.task_cpu("t").sum() == pytest.approx(20.0, abs=1e-9)
    assert sim.truth.socket_totals("cpu_dyn_j").sum(axis=0) == pytest.approx([20.0, 0.0], abs=1e-9)


def test_no_tasks_gives_static_only():
    sim = oracle.simulate(_one_cpu_per_socket([]))
    assert all(f.tasks == () for f in sim.frames)
    assert all(m.pid is None for f in sim.frames for m in f.numa)
    assert _counter_total(sim.frames, 0, PACKAGE) == 10_000_000
    assert sim.truth.socket_totals("cpu_dyn_j").sum() == 0.0


def test_wrap_guard():
    sc = _one_cpu_per_socket([], rapl_max_uj=50_000)
    with pytest.raises(ScenarioInvalid, match="counter range"):
        oracle.simulate(sc)


def test_wraps_are_reconstructed_exactly():
    sc = _one_cpu_per_socket([TaskSpec("t", cpu_schedule=[(0.0, (1.0, 0.0))])], duration=2.0,
                             rapl_max_uj=7_000_003)
    sim = oracle.simulate(sc)
    assert sim.wraps >= 1
    assert _counter_total(sim.frames, 0, PACKAGE) == 100_000_000
    cfg = EngineConfig(targets=ALL_JOBS, static_mode="excluded", static_power=sc.static_power)
    recs = [r for res in Engine(cfg, sim.topology).run(sim.frames) for r in res.records]
    assert math.fsum(r.cpu_dynamic for r in recs) == pytest.approx(80.0, rel=1e-12)


def test_capacity_error_names_time_and_socket():
    tasks = [TaskSpec("a", cpu_schedule=[(0.0, (0.0, 0.6))]),
             TaskSpec("b", cpu_schedule=[(0.0, (0.0, 0.0)), (0.5, (0.0, 0.6))])]
    with pytest.raises(ScenarioInvalid, match=r"socket 1 oversubscribed at t=0\.505"):
        oracle.simulate(_one_cpu_per_socket(tasks))


def test_memory_capacity_error():
    tasks = [TaskSpec("a", cpu_schedule=[(0.0, (0.1, 0.0))], mem_schedule=[(0.0, (2 * GIB, 0))])]
    with pytest.raises(ScenarioInvalid, match="node 0 memory oversubscribed"):
        oracle.simulate(_one_cpu_per_socket(tasks))


@pytest.mark.parametrize("tasks, needle", [
    ([TaskSpec("a", cpu_schedule=[(0.0, (0.7, 0.7))])], "exceeds one CPU"),
    ([TaskSpec("a", cpu_schedule=[(0.0, (-0.1, 0.0))])], "negative"),
    ([TaskSpec("a"), TaskSpec("a")], "duplicate"),
    ([TaskSpec("t", kind="thread-of:nobody")], "must belong to a process"),
    ([TaskSpec("p"), TaskSpec("t", kind="thread-of:p", mem_schedule=[(0.0, (1, 0))])], "private memory"),
    ([TaskSpec("a", start=0.003)], "frame grid"),
])
def test_invalid_scenarios(tasks, needle):
    with pytest.raises(ScenarioInvalid, match=needle):
        oracle.simulate(_one_cpu_per_socket(tasks))


def test_short_duration_rejected():
    with pytest.raises(ScenarioInvalid, match="two frame periods"):
        oracle.simulate(_one_cpu_per_socket([], duration=0.01))


def test_conservation_to_the_microjoule():
    sim = oracle.simulate(oracle.preset("mix-neighbor", duration=0.5))
    sc = sim.scenario
    dt_total = sc.duration
    for s in range(2):
        cpu_truth = math.fsum(sim.truth.task_cpu(l)[:, s].sum() for l in sim.truth.tasks)
        dram_truth = math.fsum(sim.truth.task_dram(l)[:, s].sum() for l in sim.truth.tasks)
        pkg = _counter_total(sim.frames, s, "package") / 1e6
        dram = _counter_total(sim.frames, s, "dram") / 1e6
        assert abs(pkg - (sc.static_power[s][0] * dt_total + cpu_truth)) <= 1e-6
        assert abs(dram - (sc.static_power[s][1] * dt_total + dram_truth)) <= 1e-6


def test_late_process_and_early_exit():
    tasks = [TaskSpec("p", cpu_schedule=[(0.0, (0.5, 0.0))], mem_schedule=[(0.0, (GIB // 4, 0))],
                      start=0.2, end=0.6),
             TaskSpec("p.t", kind="thread-of:p", cpu_schedule=[(0.0, (0.0, 0.5))], start=0.2, end=0.4)]
    sim = oracle.simulate(_one_cpu_per_socket(tasks))
    present = [{t.tid for t in f.tasks} for f in sim.frames]
    pid = sim.truth.tasks["p"].pid
    tid = sim.truth.tasks["p.t"].tid
    assert pid not in present[19] and pid in present[20] and pid in present[60] and pid not in present[61]
    assert tid in present[40] and tid not in present[41]
    # a process born in a frame reports no memory until the next one
    assert not [m for m in sim.frames[20].numa if m.pid == pid]
    assert [m for m in sim.frames[21].numa if m.pid == pid]
    assert sim.truth.task_cpu("p").sum() == pytest.approx(40 * 0.2, abs=1e-9)
    assert sim.truth.task_cpu("p.t").sum() == pytest.approx(40 * 0.1, abs=1e-9)


def test_split_placement_recovers_truth():
    tasks = [TaskSpec("p", cpu_schedule=[(0.0, (0.25, 0.25))]), TaskSpec("q", cpu_schedule=[(0.0, (0.5, 0.5))])]
    sim = oracle.simulate(_one_cpu_per_socket(tasks, seed=7))
    cfg = EngineConfig(targets=ALL_TASKS, static_mode="excluded", static_power=sim.scenario.static_power)
    recs = [r for res in Engine(cfg, sim.topology).run(sim.frames) for r in res.records]
    assert oracle.ground_truth_compare(recs, sim.truth).max_rel_error <= 1e-9


# --- files and determinism -------------------------------------------------------

def test_generation_is_byte_identical(tmp_path):
    sc = oracle.preset("mix", duration=0.3, seed=5)
    a = oracle.generate_trace(sc, tmp_path / "a")
    b = oracle.generate_trace(oracle.preset("mix", duration=0.3, seed=5), tmp_path / "b")
    assert _sha(a.trace_path) == _sha(b.trace_path)
    assert _sha(a.truth_path) == _sha(b.truth_path)
    assert a.trace_path.name == "mix-s5.trace.jsonl"


def test_seed_changes_split_placements(tmp_path):
    tasks = [TaskSpec("p", cpu_schedule=[(0.0, (0.25, 0.25))])]
    a = oracle.generate_trace(_one_cpu_per_socket(tasks, seed=1), tmp_path, stem="a")
    b = oracle.generate_trace(_one_cpu_per_socket(tasks, seed=2), tmp_path, stem="b")
    assert _sha(a.trace_path) != _sha(b.trace_path)


def test_truth_file_round_trip(tmp_path):
    sim = oracle.simulate(oracle.preset("mix-neighbor", duration=0.2))
    sim.truth.write(tmp_path / "t.jsonl")
    back = oracle.GroundTruth.read(tmp_path / "t.jsonl")
    assert back.intervals == sim.truth.intervals
    assert back.digest == sim.truth.digest and back.linear
    for label in sim.truth.tasks:
        assert np.array_equal(back.task_cpu(label), sim.truth.task_cpu(label))
        assert np.array_equal(back.task_dram(label), sim.truth.task_dram(label))
    assert np.array_equal(back.socket_totals("cpu_static_j"), sim.truth.socket_totals("cpu_static_j"))


def test_trace_header_carries_source(tmp_path):
    sc = oracle.preset("mix", duration=0.1, seed=3)
    s = oracle.generate_trace(sc, tmp_path)
    with TraceReader.open(s.trace_path) as r:
        assert r.header["source"] == {"scenario": "mix", "seed": 3, "digest": sc.digest()}
        assert len(list(r)) == s.frames == 11


def test_scenario_json_round_trip(tmp_path):
    sc = oracle.preset("cpu-sweep", duration=1.1)
    p = tmp_path / "s.json"
    p.write_text(json.dumps(sc.to_json()))
    back = oracle.load_scenario(p)
    assert back.digest() == sc.digest()


# --- presets ----------------------------------------------------------------------

def test_mix_preset_shape():
    sc = oracle.preset("mix")
    sim_infos = oracle.simulate(oracle.preset("mix", duration=0.05)).truth.tasks
    procs = [i for i in sim_infos.values() if i.kind == "process"]
    threads = [i for i in sim_infos.values() if i.kind == "thread"]
    assert len(procs) == len(threads) == 8
    assert {i.app for i in sim_infos.values()} == {"target"}
    assert sc.duration == 60.0 and sc.n_frames == 6001
    # half the CPUs and half the memory of every node
    util = [sum(t.cpu_schedule[0][1][s] for t in sc.tasks) for s in range(2)]
    mem = [sum(t.mem_schedule[0][1][s] for t in sc.tasks if t.mem_schedule) for s in range(2)]
    assert util == [8.0, 8.0]
    assert mem == [16 * GIB, 16 * GIB]


def test_mix_neighbor_duplicates_mix():
    a = oracle.preset("mix")
    b = oracle.preset("mix-neighbor")
    assert len(b.tasks) == 2 * len(a.tasks)
    assert [t.cpu_schedule for t in b.tasks[len(a.tasks):]] == [t.cpu_schedule for t in a.tasks]
    apps = oracle.simulate(oracle.preset("mix-neighbor", duration=0.05)).truth.apps()
    assert sorted(apps) == ["neighbor", "target"]


def test_cpu_sweep_ramps_with_equal_processes_and_threads():
    sc = oracle.preset("cpu-sweep")
    kinds = [t.thread_of is None for t in sc.tasks]
    assert kinds.count(True) == kinds.count(False) == 16
    levels = [max(u) for _, u in sc.tasks[0].cpu_schedule]
    assert levels[0] == 0.0 and levels[-1] == 1.0 and levels == sorted(levels)


def test_mem_sweep_grows_memory():
    sc = oracle.preset("mem-sweep")
    levels = [m[0] for _, m in sc.tasks[0].mem_schedule]
    assert levels[0] == 0 and levels[-1] == 32 * GIB and levels == sorted(levels)


def test_unknown_preset_lists_names():
    with pytest.raises(ValueError, match="cpu-sweep, mem-sweep, mix, mix-neighbor"):
        oracle.preset("gpu")


# --- comparison -------------------------------------------------------------------

def _records(sim, targets=ALL_TASKS, gamma=1.0):
    cfg = EngineConfig(ModelParams(gamma=gamma), targets, "excluded", sim.scenario.static_power)
    return [r for res in Engine(cfg, sim.topology).run(sim.frames) for r in res.records]


def test_truth_compare_exact_on_linear_scenario():
    sim = oracle.simulate(oracle.preset("mix-neighbor", duration=0.3))
    report = oracle.ground_truth_compare(_records(sim), sim.truth)
    assert report.granularity == "task"
    assert report.max_rel_error <= 1e-9
    apps = oracle.ground_truth_compare(_records(sim, ALL_JOBS), sim.truth)
    assert apps.granularity == "app" and apps.max_rel_error <= 1e-9


def test_gamma_half_probe_reports_nonzero_error():
    sim = oracle.simulate(oracle.preset("cpu-sweep", duration=1.1))
    report = oracle.ground_truth_compare(_records(sim, gamma=0.5), sim.truth)
    assert report.max_rel_error > 0.01
    assert report.mean_rel_error > 0


def test_truth_from_other_scenario_is_a_label_mismatch():
    sim = oracle.simulate(oracle.preset("mix", duration=0.1))
    other = oracle.simulate(oracle.preset("mem-sweep", duration=0.1))
    with pytest.raises(LabelMismatch):
        oracle.ground_truth_compare(_records(sim), other.truth)


def test_partial_interval_coverage_is_a_mismatch():
    sim = oracle.simulate(oracle.preset("mix", duration=0.1))
    recs = [r for r in _records(sim) if r.t0 < 0.05]
    with pytest.raises(LabelMismatch, match="intervals"):
        oracle.ground_truth_compare(recs, sim.truth)


@settings(max_examples=15, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4), st.integers(0, 1024)), min_size=1, max_size=4),
       st.integers(0, 2**16))
def test_random_linear_scenarios_recover_truth(specs, seed):
    """Any linear scenario on a 2x4 host: per-task attribution matches the generator's truth
    up to the whole-microjoule resolution of the counters."""
    tasks = []
    for i, (a, b, mem_mib) in enumerate(specs):
        tasks.append(TaskSpec(f"p{i}", cpu_schedule=[(0.0, (a / 8, b / 8))],
                              mem_schedule=[(0.0, (mem_mib << 20, 0))]))
    sc = Scenario(topology=Topology.uniform(2, 4, 100), duration=0.2, frame_period=0.01,
                  static_power=[(20.0, 3.0)] * 2, dyn_cpu_coeff=[16.0] * 2, dyn_dram_coeff=[8.0] * 2,
                  node_mem_total=[8 * GIB] * 2, tasks=tasks, seed=seed)
    sim = oracle.simulate(sc)
    report = oracle.ground_truth_compare(_records(sim), sim.truth)
    assert report.max_abs_error < 1.001e-6
