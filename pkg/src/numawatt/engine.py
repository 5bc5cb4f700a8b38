"""Attribution loop: turns consecutive telemetry frames into per-application records."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from operator import itemgetter
from typing import Iterable, Iterator, List, Optional, Sequence, Union

from . import model
from .errors import InvalidTrace, TargetExited
from .model import Diagnostics, MemDenominator, ModelParams, StaticMode
from .telemetry.counters import host_cpu_time_per_socket, rapl_deltas
from .telemetry.frames import TaskId, TelemetryFrame, Topology
from .telemetry.tasks import FrameIndex, job_roots

logger = logging.getLogger(__name__)

ALL_JOBS = "all-jobs"
_task_key = itemgetter(0, 1, 2)  # pid, tid, ppid
ALL_TASKS = "all-tasks"
SELF_APP = "engine:self"


@dataclass
class DeviceShare:
    """One application's slice of one socket's CPU or DRAM energy."""

    delta: float
    credit: float
    static: float
    share: float = 0.0  # raw usage ratio before the credit exponent
    coarse: float = 0.0  # this socket's part of the coarse baseline
    self_j: float = 0.0

    @property
    def dynamic(self) -> float:
        return self.delta * self.credit

    @property
    def total(self) -> float:
        return self.delta * self.credit + self.static


@dataclass
class SocketAttribution:
    socket: int
    cpu: DeviceShare
    dram: DeviceShare


@dataclass
class AttributionRecord:
    t0: float
    t1: float
    app: str
    per_socket: List[SocketAttribution]
    self_energy: float = 0.0
    diagnostics: List[str] = field(default_factory=list)

    @property
    def interval(self):
        return (self.t0, self.t1)

    @property
    def cpu_total(self) -> float:
        return math.fsum(s.cpu.total for s in self.per_socket)

    @property
    def dram_total(self) -> float:
        return math.fsum(s.dram.total for s in self.per_socket)

    @property
    def cpu_dynamic(self) -> float:
        return math.fsum(s.cpu.dynamic for s in self.per_socket)

    @property
    def dram_dynamic(self) -> float:
        return math.fsum(s.dram.dynamic for s in self.per_socket)

    @property
    def coarse_cpu(self) -> float:
        return math.fsum(s.cpu.coarse for s in self.per_socket)

    @property
    def coarse_dram(self) -> float:
        return math.fsum(s.dram.coarse for s in self.per_socket)


@dataclass
class HostInterval:
    """Host-wide quantities for one frame pair."""

    t0: float
    t1: float
    pkg_total: list
    dram_total: list
    pkg_static: list
    dram_static: list
    pkg_delta: list
    dram_delta: list
    cpu_busy: list
    mem_den: list
    self_cpu_dynamic: float = 0.0
    self_dram_dynamic: float = 0.0


@dataclass
class IntervalResult:
    host: HostInterval
    records: List[AttributionRecord]


@dataclass
class EngineConfig:
    model: ModelParams = field(default_factory=ModelParams)
    # root pids, ALL_JOBS, or ALL_TASKS (every task its own application)
    targets: Union[Sequence[int], str] = ALL_JOBS
    static_mode: StaticMode = StaticMode.FULL
    # per socket (package W, dram W); None means no static power
    static_power: Optional[Sequence[Sequence[float]]] = None
    pin_self: bool = False
    self_pids: Sequence[int] = ()

    def __post_init__(self):
        self.static_mode = StaticMode(self.static_mode)
        if isinstance(self.targets, str):
            if self.targets not in (ALL_JOBS, ALL_TASKS):
                raise ValueError(f"unknown target set {self.targets!r}")
        else:
            self.targets = [int(p) for p in self.targets]
            if not self.targets:
                raise ValueError("at least one target pid is required")
        if self.static_power is not None:
            rows = [tuple(float(x) for x in row) for row in self.static_power]
            for row in rows:
                if len(row) != 2 or not all(math.isfinite(x) and x >= 0 for x in row):
                    raise ValueError(f"static power per socket must be (package W, dram W) >= 0, got {row}")
            self.static_power = rows


class FramePair:
    """Everything about a frame pair that does not depend on the application."""

    def __init__(self, prev: TelemetryFrame, curr: TelemetryFrame, topology: Topology,
                 params: ModelParams, static_power, diag: Diagnostics,
                 prev_tasks: Optional[dict] = None, index: Optional[FrameIndex] = None,
                 groups=None):
        n = topology.socket_count
        self.n = n
        self.t0 = prev.timestamp
        self.t1 = curr.timestamp
        dt = self.t1 - self.t0
        self.dt = dt
        self.params = params
        self.diag = diag
        self.index = index

        self.pkg_total, self.dram_total = rapl_deltas(prev, curr, n)
        if static_power is None:
            self.pkg_static = [0.0] * n
            self.dram_static = [0.0] * n
        else:
            if dt <= 0:
                raise ValueError(f"frames at {self.t0} and {self.t1} give a non-positive interval")
            self.pkg_static = [static_power[s][0] * dt for s in range(n)]
            self.dram_static = [static_power[s][1] * dt for s in range(n)]
        self.pkg_delta = [model.dynamic_delta(e, st, diag) for e, st in zip(self.pkg_total, self.pkg_static)]
        self.dram_delta = [model.dynamic_delta(e, st, diag) for e, st in zip(self.dram_total, self.dram_static)]
        self.cpu_busy = host_cpu_time_per_socket(prev, curr, topology)
        # ratios are taken on integer ticks so equal usage gives exactly equal shares
        self.busy_ticks = [b - a for a, b in zip(prev.host_ticks, curr.host_ticks)]
        self.busy_sum = sum(self.busy_ticks)
        self.pkg_sum = sum(self.pkg_total)
        self.dram_sum = sum(self.dram_total)

        # per task: (socket of its placement in this frame, CPU ticks this interval)
        cpu_map = topology.cpu_to_socket
        host_used = [0] * n
        host_total = [0] * n
        if groups is None:
            before = prev_tasks if prev_tasks is not None else prev.task_map()
            self.task_cpu = task_cpu = {}
            for pid, tid, _, utime, stime, cpu, _ in curr.tasks:
                p = before.get(tid)
                ticks = utime + stime
                if p is not None and p[0] == pid:
                    pticks = p[3] + p[4]
                    # a regression means the tid was reused by a new task
                    if ticks >= pticks:
                        ticks -= pticks
                task_cpu[tid] = (cpu_map[cpu], ticks)

            self.proc_mem = proc_mem = {}
            for pid, node, private_b, used_b, total_b in curr.numa:
                if pid is None:
                    host_used[node] = used_b
                    host_total[node] = total_b
                else:
                    row = proc_mem.get(pid)
                    if row is None:
                        row = proc_mem[pid] = [0] * n
                    row[node] += private_b
        else:
            # accumulate straight into task sets: {tid: (set index, ...)}, {pid: (...)}, count,
            # and per task row the sets it belongs to when both frames list the same tasks in order
            tid_groups, pid_groups, n_groups, row_groups = groups
            self.group_cpu = gcpu = [[0] * n for _ in range(n_groups)]
            self.group_mem = gmem = [[0] * n for _ in range(n_groups)]
            if row_groups is not None:
                for gs, a, b in zip(row_groups, prev.tasks, curr.tasks):
                    if gs is None:
                        continue
                    ticks = b[3] + b[4]
                    pticks = a[3] + a[4]
                    if ticks >= pticks:
                        ticks -= pticks
                    s = cpu_map[b[5]]
                    for g in gs:
                        gcpu[g][s] += ticks
            else:
                before = prev_tasks if prev_tasks is not None else prev.task_map()
            for pid, tid, _, utime, stime, cpu, _ in (() if row_groups is not None else curr.tasks):
                gs = tid_groups.get(tid)
                if gs is None:
                    continue
                p = before.get(tid)
                ticks = utime + stime
                if p is not None and p[0] == pid:
                    pticks = p[3] + p[4]
                    if ticks >= pticks:
                        ticks -= pticks
                s = cpu_map[cpu]
                for g in gs:
                    gcpu[g][s] += ticks
            for pid, node, private_b, used_b, total_b in curr.numa:
                if pid is None:
                    host_used[node] = used_b
                    host_total[node] = total_b
                else:
                    gs = pid_groups.get(pid)
                    if gs is not None:
                        for g in gs:
                            gmem[g][node] += private_b
        if params.mem_denominator is MemDenominator.USED:
            self.mem_den = host_used
        else:
            self.mem_den = host_total
        self.mem_den_sum = sum(self.mem_den)

    def host(self) -> HostInterval:
        return HostInterval(self.t0, self.t1, self.pkg_total, self.dram_total, self.pkg_static,
                            self.dram_static, self.pkg_delta, self.dram_delta, self.cpu_busy,
                            self.mem_den)

    def usage(self, tids: Iterable[int], pids: Iterable[int]):
        """Per-socket CPU ticks and private bytes of a task set."""
        n = self.n
        cpu = [0] * n
        task_cpu = self.task_cpu
        for tid in tids:
            entry = task_cpu.get(tid)
            if entry is not None:
                cpu[entry[0]] += entry[1]
        mem = [0] * n
        proc_mem = self.proc_mem
        for pid in pids:
            row = proc_mem.get(pid)
            if row is not None:
                for s in range(n):
                    mem[s] += row[s]
        return cpu, mem

    def attribute(self, app: str, tids, pids, static_mode: StaticMode,
                  self_shares=None) -> AttributionRecord:
        cpu_t, mem_b = self.usage(tids, pids)
        return self.attribute_usage(app, cpu_t, mem_b, static_mode, self_shares)

    def attribute_usage(self, app, cpu_t, mem_b, static_mode, self_shares=None) -> AttributionRecord:
        static_mode = StaticMode(static_mode)
        p = self.params
        diag = self.diag
        n = self.n
        cpu_ratio = min(sum(cpu_t) / self.busy_sum, 1.0) if self.busy_sum > 0 else 0.0
        mem_ratio = min(sum(mem_b) / self.mem_den_sum, 1.0) if self.mem_den_sum > 0 else 0.0
        per_socket = []
        for s in range(n):
            busy = self.busy_ticks[s]
            c_share = min(cpu_t[s] / busy, 1.0) if busy > 0 else 0.0
            c_credit = model.cpu_credit(cpu_t[s], busy, p.gamma, diag)
            den = self.mem_den[s]
            if den > 0:
                m_share = min(mem_b[s] / den, 1.0)
                m_credit = model.mem_credit(mem_b[s], den, p.sigma, diag)
            else:
                m_share = 0.0
                m_credit = 0.0
                if mem_b[s] > 0:
                    diag.warn("zero_mem_total", f"node {s} reports no memory but app holds {mem_b[s]} B")
            # same rule as model.static_share, inlined for the per-frame loop
            if static_mode is StaticMode.FULL:
                c_static, m_static = self.pkg_static[s], self.dram_static[s]
            elif static_mode is StaticMode.APPORTIONED:
                c_static, m_static = self.pkg_static[s] * c_share, self.dram_static[s] * m_share
            else:
                c_static = m_static = 0.0
            cpu = DeviceShare(self.pkg_delta[s], c_credit, c_static, c_share,
                              self.pkg_total[s] * cpu_ratio)
            dram = DeviceShare(self.dram_delta[s], m_credit, m_static, m_share,
                               self.dram_total[s] * mem_ratio)
            if self_shares is not None:
                cpu.self_j = self_shares[s].cpu.total
                dram.self_j = self_shares[s].dram.total
            per_socket.append(SocketAttribution(s, cpu, dram))
        return AttributionRecord(self.t0, self.t1, app, per_socket)


def compute_frame_attribution(prev: TelemetryFrame, curr: TelemetryFrame, app_tasks: Sequence[TaskId],
                              params: ModelParams, static_mode=StaticMode.FULL, *,
                              topology: Topology, static_power=None, app: str = "app",
                              diag: Optional[Diagnostics] = None) -> AttributionRecord:
    """Attribute one interval's CPU and DRAM energy to the tasks in ``app_tasks``."""
    diag = diag if diag is not None else Diagnostics()
    if curr.timestamp - prev.timestamp <= 0:
        raise ValueError("zero-length interval")
    pair = FramePair(prev, curr, topology, params, static_power, diag)
    tids = [t.tid for t in app_tasks]
    pids = [t.pid for t in app_tasks if t.tid == t.pid]
    rec = pair.attribute(app, tids, pids, StaticMode(static_mode))
    rec.diagnostics = diag.as_list()
    return rec


def account_self_energy(pair: FramePair, engine_tids: Iterable[int], static_mode=StaticMode.FULL):
    """Energy the engine's own tasks drew this interval, as a record (never added to targets)."""
    tids = [t for t in engine_tids if t in pair.task_cpu]
    pids = [t for t in tids if t in pair.proc_mem]
    return pair.attribute(SELF_APP, tids, pids, StaticMode(static_mode))


def least_loaded_cpu(cpu_tick_deltas: Sequence[int]) -> int:
    """Index of the smallest delta; ties go to the lowest index."""
    best = 0
    for i, d in enumerate(cpu_tick_deltas):
        if d < cpu_tick_deltas[best]:
            best = i
    return best


def pin_self_to_least_loaded_core(topology: Topology, prev: Optional[TelemetryFrame],
                                  curr: Optional[TelemetryFrame], apply: bool = True) -> Optional[int]:
    """Pin every thread of this process to the least-busy logical CPU of the last interval.

    Returns the chosen CPU, or ``None`` when per-CPU counters are unavailable
    (replayed traces carry none).
    """
    if prev is None or curr is None or prev.cpu_ticks is None or curr.cpu_ticks is None:
        return None
    deltas = [b - a for a, b in zip(prev.cpu_ticks, curr.cpu_ticks)]
    cpus = sorted(topology.cpu_to_socket)
    cpu = cpus[least_loaded_cpu(deltas)]
    if apply:
        try:
            for tid in os.listdir("/proc/self/task"):
                os.sched_setaffinity(int(tid), {cpu})
        except (OSError, AttributeError) as e:
            logger.warning("could not pin to CPU %d (%s); continuing unpinned", cpu, e)
    return cpu


class Engine:
    """Consumes frames from a source and yields one :class:`IntervalResult` per frame pair.

    ``status`` ends as ``"complete"``, ``"target-exited"`` or ``"partial"``
    (source failed mid-run; ``error`` holds the reason).
    """

    def __init__(self, config: EngineConfig, topology: Topology):
        self.config = config
        self.topology = topology
        self.diag = Diagnostics()
        self.status = "idle"
        self.error: Optional[str] = None
        self.pinned_cpu: Optional[int] = None
        self.frames = 0
        self._exited = set()
        self._pin_tried = False
        self._task_key = None
        self._cached_apps: list = []
        self._cached_self: list = []
        self._groups = None

    def _apps(self, index: FrameIndex):
        """``[(label, tids, pids)]`` for the current frame's task sets."""
        targets = self.config.targets
        self_pids = set(self.config.self_pids)
        if targets == ALL_TASKS:
            return [(f"task:{t.tid}", (t.tid,), (t.pid,) if t.tid == t.pid else ())
                    for tid, t in sorted(index.tasks.items()) if t.pid not in self_pids]
        if targets == ALL_JOBS:
            roots = job_roots(index, exclude=self_pids)
            stop = set(roots) | self_pids
            out = []
            for r in roots:
                pids = index.tree_pids(r, stop)
                tids = [t.tid for pid in pids for t in index.by_pid[pid]]
                out.append((f"pid:{r}", tids, pids))
            return out
        out = []
        for r in targets:
            if r in self._exited:
                continue
            try:
                pids = index.tree_pids(r, self_pids)
            except TargetExited:
                logger.info("target %d exited", r)
                self._exited.add(r)
                continue
            tids = [t.tid for pid in pids for t in index.by_pid[pid]]
            out.append((f"pid:{r}", tids, pids))
        return out

    def _self_tids(self, index: FrameIndex):
        tids = []
        for pid in self.config.self_pids:
            tids.extend(t.tid for t in index.by_pid.get(pid, ()))
        return tids

    def _group_maps(self, index: FrameIndex, frame: TelemetryFrame):
        """Task-set membership for :class:`FramePair`; the engine's own tasks come last."""
        sets = [(tids, pids) for _, tids, pids in self._cached_apps]
        self_tids = self._cached_self
        sets.append((self_tids, [t for t in self_tids if t in index.by_pid]))
        tid_groups: dict = {}
        pid_groups: dict = {}
        for g, (tids, pids) in enumerate(sets):
            for tid in tids:
                tid_groups[tid] = tid_groups.get(tid, ()) + (g,)
            for pid in pids:
                pid_groups[pid] = pid_groups.get(pid, ()) + (g,)
        rows = [tid_groups.get(t.tid) for t in frame.tasks]
        return tid_groups, pid_groups, len(sets), rows

    def run(self, source: Iterable[TelemetryFrame]) -> Iterator[IntervalResult]:
        cfg = self.config
        mode = cfg.static_mode
        self.status = "running"
        prev = None
        prev_key = None
        it = iter(source)
        while True:
            try:
                curr = next(it)
            except StopIteration:
                break
            except Exception as e:
                self.status = "partial"
                self.error = f"{type(e).__name__}: {e}"
                logger.error("telemetry source failed after %d frames: %s", self.frames, self.error)
                return
            self.frames += 1
            key = tuple(map(_task_key, curr.tasks))
            if prev is None or curr.timestamp <= prev.timestamp:
                if prev is not None:
                    self.diag.warn("skipped_intervals", f"zero-length interval at t={curr.timestamp}; skipped")
                prev, prev_key = curr, key
                continue
            if cfg.pin_self and not self._pin_tried:
                self._pin_tried = True
                self.pinned_cpu = pin_self_to_least_loaded_core(self.topology, prev, curr)

            # task sets only need rebuilding when the process/thread structure changes
            if key != self._task_key:
                index = FrameIndex(curr)
                self._task_key = key
                self._cached_apps = self._apps(index)
                self._cached_self = self._self_tids(index)
                self._groups = self._group_maps(index, curr)
            apps = self._cached_apps
            groups = self._groups
            if key != prev_key:
                groups = groups[:3] + (None,)
            diag = Diagnostics()
            pair = FramePair(prev, curr, self.topology, cfg.model, cfg.static_power, diag, groups=groups)
            if not apps and not isinstance(cfg.targets, str):
                self.status = "target-exited"
                self.diag.merge(diag)
                return
            host = pair.host()
            self_rec = None
            if cfg.self_pids:
                g = len(apps)
                self_rec = pair.attribute_usage(SELF_APP, pair.group_cpu[g], pair.group_mem[g], mode)
                host.self_cpu_dynamic = self_rec.cpu_dynamic
                host.self_dram_dynamic = self_rec.dram_dynamic
            records = []
            self_shares = self_rec.per_socket if self_rec is not None else None
            group_cpu, group_mem = pair.group_cpu, pair.group_mem
            for g, (label, _, _) in enumerate(apps):
                rec = pair.attribute_usage(label, group_cpu[g], group_mem[g], mode, self_shares)
                if self_rec is not None:
                    rec.self_energy = self_rec.cpu_total + self_rec.dram_total
                records.append(rec)
            warnings = diag.as_list()
            if warnings:
                for rec in records:
                    rec.diagnostics = warnings
            self.diag.merge(diag)
            yield IntervalResult(host, records)
            prev, prev_key = curr, key
        self.status = "complete"


def run_attribution(config: EngineConfig, source, topology: Topology) -> Iterator[AttributionRecord]:
    """Flat stream of records; one per target application per frame pair."""
    engine = Engine(config, topology)
    for result in engine.run(source):
        yield from result.records


# --- validation by summation -------------------------------------------------

@dataclass
class ClosureRow:
    t0: float
    t1: float
    device: str
    attributed: float
    measured: float
    complete: bool

    @property
    def abs_error(self) -> float:
        return abs(self.attributed - self.measured)

    @property
    def rel_error(self) -> float:
        if self.measured == 0:
            return self.abs_error
        return self.abs_error / abs(self.measured)


@dataclass
class ClosureReport:
    rows: List[ClosureRow]

    def device_rows(self, device: str) -> List[ClosureRow]:
        return [r for r in self.rows if r.device == device]

    def max_interval_error(self, device: Optional[str] = None) -> float:
        rows = self.rows if device is None else self.device_rows(device)
        return max((r.rel_error for r in rows), default=0.0)

    def run_error(self, device: str) -> float:
        rows = self.device_rows(device)
        att = math.fsum(r.attributed for r in rows)
        meas = math.fsum(r.measured for r in rows)
        if meas == 0:
            return abs(att - meas)
        return abs(att - meas) / abs(meas)

    @property
    def incomplete(self) -> List[ClosureRow]:
        return [r for r in self.rows if not r.complete]


COVERAGE_TOL = 1e-9


def validate_by_summation(results: Iterable[IntervalResult]) -> ClosureReport:
    """Compare summed attributions (static counted once per socket) against measured totals.

    Records must cover every job on the host; intervals where the summed
    usage shares fall short of 1 on an active socket are flagged incomplete.
    """
    rows = []
    for res in results:
        h = res.host
        n = len(h.pkg_total)
        for device in ("cpu", "dram"):
            if device == "cpu":
                measured = math.fsum(h.pkg_total)
                static = math.fsum(h.pkg_static)
                dyn = [r.cpu_dynamic for r in res.records]
                self_dyn = h.self_cpu_dynamic
                active = [h.cpu_busy[s] > 0 for s in range(n)]
                cover = [math.fsum(r.per_socket[s].cpu.share for r in res.records) for s in range(n)]
            else:
                measured = math.fsum(h.dram_total)
                static = math.fsum(h.dram_static)
                dyn = [r.dram_dynamic for r in res.records]
                self_dyn = h.self_dram_dynamic
                active = [h.mem_den[s] > 0 for s in range(n)]
                cover = [math.fsum(r.per_socket[s].dram.share for r in res.records) for s in range(n)]
            complete = all(not a or c >= 1 - COVERAGE_TOL for a, c in zip(active, cover))
            attributed = math.fsum(dyn) + static + self_dyn
            rows.append(ClosureRow(h.t0, h.t1, device, attributed, measured, complete))
    return ClosureReport(rows)


__all__ = [
    "ALL_JOBS", "ALL_TASKS", "AttributionRecord", "ClosureReport", "DeviceShare", "Engine",
    "EngineConfig", "FramePair", "HostInterval", "IntervalResult", "InvalidTrace",
    "SocketAttribution", "account_self_energy", "compute_frame_attribution",
    "least_loaded_cpu", "pin_self_to_least_loaded_core", "run_attribution",
    "validate_by_summation",
]
