import math
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from numawatt import oracle
from numawatt.engine import (
    ALL_JOBS,
    ALL_TASKS,
    Engine,
    EngineConfig,
    compute_frame_attribution,
    least_loaded_cpu,
    pin_self_to_least_loaded_core,
    run_attribution,
    validate_by_summation,
)
from numawatt.model import ModelParams, StaticMode
from numawatt.telemetry import NumaMemReading, TaskId, TelemetryFrame

from builders import UJ, frame, golden_frames, host_numa, task, topo2


def _ramp(n, pids, start=0.0, step=1.0, ticks=50, pkg_j=10, dram_j=2):
    """``n`` frames where every listed process burns ``ticks`` per interval on CPU 0."""
    out = []
    for k in range(n):
        tasks = [task(p, p, 1, ticks * k, 0) for p in pids]
        numa = [NumaMemReading(p, 0, 1 << 20) for p in pids] + list(host_numa([1 << 22, 1 << 22], [1 << 30] * 2))
        busy = ticks * len(pids) * k
        out.append(frame(start + step * k, [pkg_j * k * UJ, pkg_j * k * UJ], [dram_j * k * UJ] * 2,
                         [busy, busy], tasks, numa))
    return out


# --- single interval ----------------------------------------------------------------

def test_golden_interval_fine_and_coarse():
    topo, (f0, f1) = golden_frames()
    apps = [TaskId(100, 100), TaskId(100, 101, 100)]
    rec = compute_frame_attribution(f0, f1, apps, ModelParams(), StaticMode.EXCLUDED, topology=topo)
    assert rec.cpu_total == pytest.approx(54.0, abs=1e-9)
    assert rec.coarse_cpu == pytest.approx(56.0, abs=1e-9)
    assert [s.cpu.credit for s in rec.per_socket] == [0.3, 0.9]


def test_idle_target_gets_static_only():
    topo, (f0, f1) = golden_frames()
    idle = [TaskId(7, 7)]
    static = [(0.1, 0.01), (0.1, 0.01)]
    for mode, cpu_static in (("full", 0.1 * 100 * 2), ("apportioned", 0.0), ("excluded", 0.0)):
        rec = compute_frame_attribution(f0, f1, idle, ModelParams(), mode, topology=topo, static_power=static)
        assert all(s.cpu.credit == 0 and s.dram.credit == 0 for s in rec.per_socket)
        assert rec.cpu_total == pytest.approx(cpu_static)


def test_sole_tenant_takes_everything():
    topo = topo2()
    f0 = frame(0, [0, 0], [0, 0], [0, 0], [task(10, 10, 1, 0, 0), task(10, 11, 1, 0, 2)])
    f1 = frame(1, [20 * UJ, 30 * UJ], [0, 0], [100, 100], [task(10, 10, 1, 100, 0), task(10, 11, 1, 100, 2)])
    rec = compute_frame_attribution(f0, f1, [TaskId(10, 10), TaskId(10, 11, 10)], ModelParams(), "full",
                                    topology=topo, static_power=[(5.0, 0.0), (5.0, 0.0)])
    assert [s.cpu.credit for s in rec.per_socket] == [1.0, 1.0]
    assert rec.cpu_total == pytest.approx((20 - 5) + (30 - 5) + 10)


def test_zero_length_interval_rejected():
    topo, (f0, _) = golden_frames()
    with pytest.raises(ValueError):
        compute_frame_attribution(f0, f0, [TaskId(100, 100)], ModelParams(), topology=topo)


def test_gamma_changes_the_share():
    topo, (f0, f1) = golden_frames()
    apps = [TaskId(100, 100), TaskId(100, 101, 100)]
    rec = compute_frame_attribution(f0, f1, apps, ModelParams(gamma=0.5), "excluded", topology=topo)
    assert rec.cpu_total == pytest.approx(30 * 0.3 ** 0.5 + 50 * 0.9 ** 0.5)


# --- engine loop --------------------------------------------------------------------

def test_record_count_single_target():
    topo = topo2()
    recs = list(run_attribution(EngineConfig(targets=[10]), _ramp(3, [10]), topo))
    assert len(recs) == 2
    assert [r.app for r in recs] == ["pid:10", "pid:10"]


def test_record_count_all_jobs():
    topo = topo2()
    recs = list(run_attribution(EngineConfig(targets=ALL_JOBS), _ramp(2, [10, 20, 30, 40]), topo))
    assert sorted(r.app for r in recs) == ["pid:10", "pid:20", "pid:30", "pid:40"]


def test_all_tasks_labels_each_task():
    topo, frames = golden_frames()
    recs = list(run_attribution(EngineConfig(targets=ALL_TASKS, static_mode="excluded"), frames, topo))
    assert {r.app: round(r.cpu_total, 9) for r in recs} == {"task:100": 9.0, "task:101": 45.0}


def test_intervals_tile_the_trace():
    topo = topo2()
    frames = _ramp(6, [10], step=0.01)
    recs = list(run_attribution(EngineConfig(targets=[10]), frames, topo))
    assert [(r.t0, r.t1) for r in recs] == [(a.timestamp, b.timestamp) for a, b in zip(frames, frames[1:])]


def test_target_exit_stops_the_run():
    topo = topo2()
    frames = _ramp(10, [10, 20])
    frames[5:] = [replace(f, tasks=tuple(t for t in f.tasks if t.pid != 10)) for f in frames[5:]]
    engine = Engine(EngineConfig(targets=[10]), topo)
    recs = [r for res in engine.run(frames) for r in res.records]
    assert len(recs) == 4
    assert (recs[-1].t0, recs[-1].t1) == (3.0, 4.0)
    assert engine.status == "target-exited"


def test_source_failure_keeps_completed_records():
    topo = topo2()

    def source():
        yield from _ramp(4, [10])
        raise OSError("disk went away")

    engine = Engine(EngineConfig(targets=[10]), topo)
    recs = [r for res in engine.run(source()) for r in res.records]
    assert len(recs) == 3
    assert engine.status == "partial" and "disk went away" in engine.error


def test_zero_length_interval_is_skipped():
    topo = topo2()
    frames = _ramp(3, [10])
    frames.insert(2, frames[1])
    engine = Engine(EngineConfig(targets=[10]), topo)
    results = list(engine.run(frames))
    assert len(results) == 2
    assert engine.diag.skipped_intervals == 1


def test_reused_tid_counts_from_zero():
    topo = topo2()
    f0 = frame(0, [0, 0], [0, 0], [0, 0], [task(10, 10, 1, 500, 0)])
    f1 = frame(1, [10 * UJ, 0], [0, 0], [100, 0], [task(10, 10, 1, 40, 0)])
    rec = next(run_attribution(EngineConfig(targets=[10], static_mode="excluded"), [f0, f1], topo))
    assert rec.per_socket[0].cpu.credit == 0.4


def test_zero_memory_host_warns():
    topo = topo2()
    f0 = frame(0, [0, 0], [0, 0], [0, 0], [task(10, 10, 1, 0, 0)])
    f1 = frame(1, [0, 0], [UJ, UJ], [10, 0], [task(10, 10, 1, 10, 0)], [NumaMemReading(10, 0, 4096)])
    engine = Engine(EngineConfig(targets=[10]), topo)
    res = next(engine.run([f0, f1]))
    assert res.records[0].dram_dynamic == 0.0
    assert "zero_mem_total=1" in res.records[0].diagnostics


# --- self energy ------------------------------------------------------------------

def _with_engine(ticks_engine=50, ticks_target=950):
    topo = topo2()
    f0 = frame(0, [0, 0], [0, 0], [0, 0], [task(10, 10, 1, 0, 0), task(50, 50, 1, 0, 1)])
    f1 = frame(1, [10 * UJ, 0], [0, 0], [ticks_engine + ticks_target, 0],
               [task(10, 10, 1, ticks_target, 0), task(50, 50, 1, ticks_engine, 1)])
    return topo, [f0, f1]


def test_self_energy_five_percent_of_socket():
    topo, frames = _with_engine()
    cfg = EngineConfig(targets=[10], static_mode="excluded", self_pids=(50,))
    res = next(Engine(cfg, topo).run(frames))
    (rec,) = res.records
    assert rec.self_energy == pytest.approx(0.5, abs=1e-12)
    assert rec.cpu_total == pytest.approx(9.5, abs=1e-12)
    assert res.host.self_cpu_dynamic == pytest.approx(0.5)


def test_idle_engine_self_energy_is_static_share():
    topo, frames = _with_engine(ticks_engine=0)
    static = [(1.0, 0.5), (1.0, 0.5)]
    cfg = EngineConfig(targets=[10], static_mode="full", static_power=static, self_pids=(50,))
    (rec,) = next(Engine(cfg, topo).run(frames)).records
    assert rec.self_energy == pytest.approx(2 * (1.0 + 0.5))
    cfg = EngineConfig(targets=[10], static_mode="apportioned", static_power=static, self_pids=(50,))
    (rec,) = next(Engine(cfg, topo).run(frames)).records
    assert rec.self_energy == 0.0


def test_self_energy_absent_from_replay_frames():
    topo, frames = golden_frames()
    cfg = EngineConfig(targets=[100], self_pids=(99999,))
    (rec,) = next(Engine(cfg, topo).run(frames)).records
    assert rec.self_energy == 0.0


def test_self_accounting_never_changes_targets():
    topo, frames = _with_engine()
    off = next(Engine(EngineConfig(targets=ALL_JOBS, static_mode="full", static_power=[(1, 1), (1, 1)]),
                      topo).run(frames))
    on = next(Engine(EngineConfig(targets=ALL_JOBS, static_mode="full", static_power=[(1, 1), (1, 1)],
                                  self_pids=(50,)), topo).run(frames))
    assert [r.app for r in on.records] == ["pid:10"]
    assert {r.app for r in off.records} == {"pid:10", "pid:50"}
    target_off = next(r for r in off.records if r.app == "pid:10")
    assert on.records[0].cpu_total == target_off.cpu_total
    assert on.records[0].dram_total == target_off.dram_total
    assert all(s.cpu.self_j > 0 for s in on.records[0].per_socket[:1])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 200), st.integers(0, 200), st.integers(0, 200)), min_size=1, max_size=6))
def test_self_separation_property(steps):
    """Target totals are identical with self accounting on or off, whatever the load."""
    topo = topo2()
    frames = []
    acc = [0, 0, 0]
    for k, (a, b, e) in enumerate([(0, 0, 0)] + steps):
        acc = [acc[0] + a, acc[1] + b, acc[2] + e]
        tasks = [task(10, 10, 1, acc[0], 0), task(20, 20, 1, acc[1], 2), task(50, 50, 1, acc[2], 1)]
        frames.append(frame(k, [7 * k * UJ, 3 * k * UJ], [k * UJ, k * UJ], [acc[0] + acc[2] + 5 * k, acc[1]], tasks,
                            list(host_numa([1 << 20] * 2, [1 << 30] * 2))))
    static = [(1.0, 0.2), (1.0, 0.2)]
    base = dict(targets=[10, 20], static_mode="apportioned", static_power=static)
    off = [r for res in Engine(EngineConfig(**base), topo).run(frames) for r in res.records]
    on = [r for res in Engine(EngineConfig(**base, self_pids=(50,)), topo).run(frames) for r in res.records]
    assert [(r.app, r.cpu_total, r.dram_total) for r in off] == [(r.app, r.cpu_total, r.dram_total) for r in on]
    assert all(r.self_energy >= 0 for r in on)


# --- pinning ----------------------------------------------------------------------

def test_least_loaded_cpu():
    assert least_loaded_cpu([5, 1, 9, 1]) == 1
    assert least_loaded_cpu([3, 3, 3, 3]) == 0


def test_pinning_is_a_noop_in_replay():
    topo, (f0, f1) = golden_frames()
    assert pin_self_to_least_loaded_core(topo, f0, f1) is None


def test_pinning_chooses_from_cpu_ticks():
    topo = topo2()
    f0 = TelemetryFrame(0.0, (), (), (), (0, 0), (0, 0, 0, 0))
    f1 = TelemetryFrame(1.0, (), (), (), (6, 10), (5, 1, 9, 1))
    assert pin_self_to_least_loaded_core(topo, f0, f1, apply=False) == 1


# --- summation closure -------------------------------------------------------------

def _oracle(name="mix-neighbor", duration=0.5):
    return oracle.simulate(oracle.preset(name, duration=duration))


def test_closure_on_linear_trace():
    sim = _oracle()
    static = sim.scenario.static_power
    cfg = EngineConfig(targets=ALL_JOBS, static_mode="apportioned", static_power=static)
    report = validate_by_summation(Engine(cfg, sim.topology).run(sim.frames))
    assert len(report.rows) == 2 * (len(sim.frames) - 1)
    assert report.max_interval_error() <= 1e-9
    assert not report.incomplete


def test_omitted_job_leaves_its_dynamic_share():
    sim = _oracle()
    roots = sim.truth.app_roots()
    cfg = EngineConfig(targets=[roots["target"]], static_mode="apportioned",
                       static_power=sim.scenario.static_power)
    report = validate_by_summation(Engine(cfg, sim.topology).run(sim.frames))
    labels = sim.truth.apps()["neighbor"]
    for device, series in (("cpu", sim.truth.task_cpu), ("dram", sim.truth.task_dram)):
        rows = report.device_rows(device)
        assert rows and all(not r.complete for r in rows)
        for i, row in enumerate(rows):
            neighbor = math.fsum(series(l)[i].sum() for l in labels)
            assert neighbor > 0
            assert row.measured - row.attributed == pytest.approx(neighbor, rel=1e-9)
