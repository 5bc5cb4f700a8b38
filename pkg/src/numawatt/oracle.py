"""Synthetic multi-tenant traces with exact per-task energy ground truth.

The generative power model is additive and linear: a socket's package
energy over an interval is its static power times the interval plus
``dyn_cpu_coeff * busy_ticks / (cpus_on_socket * clk_tck)``, and DRAM is
static plus ``dyn_dram_coeff * private_bytes / node_bytes * interval``.
Each task's share of the dynamic part is known exactly, which is what the
attribution engine should recover.

All arithmetic is done on integers over per-socket common denominators,
so generation is exact and deterministic; only the written RAPL counters
are floored to whole microjoules.
"""

from __future__ import annotations

import bisect
import hashlib
import json
import logging
import math
import os
import random
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ScenarioInvalid
from .telemetry.frames import DRAM, PACKAGE, NumaMemReading, RaplReading, TaskCpuReading, TelemetryFrame, Topology
from .telemetry.trace import TraceWriter, encode_frame

logger = logging.getLogger(__name__)

GIB = 1 << 30
MIB = 1 << 20
# Intel's usual package energy range, about 262 kJ
DEFAULT_MAX_UJ = 262_143_328_850
PID_BASE = 1000
TRUTH_VERSION = 1


def _frac(x) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(str(x))


def _lcm(*xs) -> int:
    out = 1
    for x in xs:
        out = out * x // math.gcd(out, x)
    return out


@dataclass
class TaskSpec:
    label: str
    kind: str = "process"  # or "thread-of:<process label>"
    parent: Optional[str] = None  # parent process label, for child processes
    # [(from_time, per-socket utilization)], piecewise constant; utilization is
    # in units of one logical CPU, so a single task stays within [0, 1] in total
    cpu_schedule: List[Tuple[float, Sequence[float]]] = field(default_factory=list)
    # [(from_time, per-node private bytes)], processes only
    mem_schedule: List[Tuple[float, Sequence[int]]] = field(default_factory=list)
    start: float = 0.0
    end: Optional[float] = None

    @property
    def thread_of(self) -> Optional[str]:
        if self.kind.startswith("thread-of:"):
            return self.kind.split(":", 1)[1]
        return None


@dataclass
class Scenario:
    topology: Topology
    duration: float
    frame_period: float
    static_power: List[Tuple[float, float]]  # per socket (package W, dram W)
    dyn_cpu_coeff: List[float]  # per socket, W at full socket utilization
    dyn_dram_coeff: List[float]  # per socket, W with the whole node's memory in use
    tasks: List[TaskSpec]
    node_mem_total: List[int] = field(default_factory=list)
    seed: int = 0
    name: str = "custom"
    rapl_max_uj: int = DEFAULT_MAX_UJ
    # exponent on socket utilization for package power; 1.0 is the linear model
    cpu_power_exponent: float = 1.0

    @property
    def linear(self) -> bool:
        return self.cpu_power_exponent == 1.0

    @property
    def n_frames(self) -> int:
        return int(round(self.duration / self.frame_period)) + 1

    def to_json(self) -> dict:
        d = asdict(self)
        d["topology"] = self.topology.to_json()
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "Scenario":
        obj = dict(obj)
        obj["topology"] = Topology.from_json(obj["topology"])
        obj["tasks"] = [TaskSpec(**t) for t in obj["tasks"]]
        obj["static_power"] = [tuple(x) for x in obj["static_power"]]
        return cls(**obj)

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TaskInfo:
    label: str
    app: str
    pid: int
    tid: int
    ppid: int
    kind: str


class GroundTruth:
    """Per-task and per-socket dynamic energies for every interval."""

    def __init__(self, scenario_name: str, digest: str, linear: bool, static_power,
                 tasks: Dict[str, TaskInfo], n_sockets: int):
        self.scenario = scenario_name
        self.digest = digest
        self.linear = linear
        self.static_power = [tuple(map(float, p)) for p in static_power]
        self.tasks = tasks
        self.n_sockets = n_sockets
        self.intervals: List[Tuple[float, float]] = []
        # label -> per interval list of per-socket values
        self._cpu: Dict[str, list] = {l: [] for l in tasks}
        self._dram: Dict[str, list] = {l: [] for l in tasks}
        self._socket_rows: list = []  # per interval: dict of per-socket lists

    def _append(self, interval, task_cpu, task_dram, socket_row):
        self.intervals.append(interval)
        zero = (0.0,) * self.n_sockets
        for l in self.tasks:
            self._cpu[l].append(task_cpu.get(l, zero))
            self._dram[l].append(task_dram.get(l, zero))
        self._socket_rows.append(socket_row)

    def task_cpu(self, label: str) -> np.ndarray:
        return np.asarray(self._cpu[label], dtype=float).reshape(-1, self.n_sockets)

    def task_dram(self, label: str) -> np.ndarray:
        return np.asarray(self._dram[label], dtype=float).reshape(-1, self.n_sockets)

    def socket_totals(self, key: str) -> np.ndarray:
        return np.asarray([row[key] for row in self._socket_rows], dtype=float)

    def apps(self) -> Dict[str, List[str]]:
        out: Dict[str, List[str]] = {}
        for info in self.tasks.values():
            out.setdefault(info.app, []).append(info.label)
        return out

    def app_roots(self) -> Dict[str, int]:
        return {info.app: info.pid for info in self.tasks.values() if info.label == info.app}

    def header(self) -> dict:
        return {
            "version": TRUTH_VERSION, "kind": "truth", "scenario": self.scenario,
            "digest": self.digest, "linear": self.linear,
            "static_w": [list(p) for p in self.static_power], "sockets": self.n_sockets,
            "tasks": [asdict(t) for t in self.tasks.values()],
        }

    def write(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
        with open(tmp, "w", encoding="utf-8", newline="\n") as f:
            f.write(json.dumps(self.header(), separators=(",", ":")) + "\n")
            for i, iv in enumerate(self.intervals):
                ivl = [iv[0], iv[1]]
                for l in self.tasks:
                    c = self._cpu[l][i]
                    d = self._dram[l][i]
                    for s in range(self.n_sockets):
                        if c[s] or d[s]:
                            f.write(json.dumps({"interval": ivl, "label": l, "socket": s,
                                                "cpu_dyn_j": c[s], "dram_dyn_j": d[s]},
                                               separators=(",", ":")) + "\n")
                row = self._socket_rows[i]
                for s in range(self.n_sockets):
                    f.write(json.dumps({"interval": ivl, "socket": s, "totals": {
                        k: row[k][s] for k in sorted(row)}}, separators=(",", ":")) + "\n")
        os.replace(tmp, path)

    @classmethod
    def read(cls, path) -> "GroundTruth":
        with open(path, "r", encoding="utf-8") as f:
            header = json.loads(f.readline())
            if header.get("kind") != "truth":
                raise ValueError(f"{path} is not a ground-truth file")
            tasks = {t["label"]: TaskInfo(**t) for t in header["tasks"]}
            n = header["sockets"]
            gt = cls(header["scenario"], header["digest"], header["linear"], header["static_w"], tasks, n)
            cur = None
            task_cpu: dict = {}
            task_dram: dict = {}
            sock: dict = {}
            for line in f:
                if not line.strip():
                    continue
                row = json.loads(line)
                iv = tuple(row["interval"])
                if iv != cur:
                    if cur is not None:
                        gt._append(cur, task_cpu, task_dram, sock)
                    cur, task_cpu, task_dram, sock = iv, {}, {}, {}
                s = row["socket"]
                if "totals" in row:
                    for k, v in row["totals"].items():
                        sock.setdefault(k, [0.0] * n)[s] = v
                else:
                    l = row["label"]
                    task_cpu.setdefault(l, [0.0] * n)[s] = row["cpu_dyn_j"]
                    task_dram.setdefault(l, [0.0] * n)[s] = row["dram_dyn_j"]
            if cur is not None:
                gt._append(cur, task_cpu, task_dram, sock)
        return gt


# --- generation -----------------------------------------------------------------

def _grid(t: float, period: Fraction, what: str) -> int:
    k = _frac(t) / period
    if k.denominator != 1:
        kr = round(k)
        if abs(float(k) - kr) > 1e-6:
            raise ScenarioInvalid(f"{what} {t} s is not on the {float(period)} s frame grid")
        return int(kr)
    return int(k)


class _Schedule:
    """Piecewise-constant schedule looked up by half-frame index.

    Index ``m`` stands for time ``m * period / 2``; interval ``k`` is
    evaluated at its midpoint ``m = 2k - 1``.
    """

    def __init__(self, points, default, period: Fraction):
        pts = sorted(points, key=lambda p: p[0]) if points else [(0.0, default)]
        self.starts = [math.ceil(_frac(t) * 2 / period) for t, _ in pts]
        self.values = [tuple(v) for _, v in pts]
        self.default = tuple(default)

    def index(self, m: int) -> int:
        return bisect.bisect_right(self.starts, m) - 1

    def at(self, m: int):
        i = self.index(m)
        return self.values[i] if i >= 0 else self.default


class _CpuSegment:
    __slots__ = ("u", "total", "nz", "weights")

    def __init__(self, u, label):
        self.u = tuple(float(x) for x in u)
        if min(self.u, default=0.0) < 0:
            raise ScenarioInvalid(f"task {label} has negative utilization")
        self.total = sum((_frac(x) for x in u), Fraction(0))
        if self.total > 1:
            raise ScenarioInvalid(f"task {label} utilization {float(self.total)} exceeds one CPU")
        self.nz = [s for s, x in enumerate(self.u) if x]
        self.weights = [self.u[s] for s in self.nz]


def _layout(scenario: Scenario):
    """Resolve labels into pids/tids, apps and parents."""
    specs = {t.label: t for t in scenario.tasks}
    if len(specs) != len(scenario.tasks):
        raise ScenarioInvalid("duplicate task labels")
    infos: Dict[str, TaskInfo] = {}
    next_id = PID_BASE
    ids = {}
    for t in scenario.tasks:
        ids[t.label] = next_id
        next_id += 1

    def app_of(label, seen=()):
        t = specs[label]
        if label in seen:
            raise ScenarioInvalid(f"cycle in task tree at {label}")
        owner = t.thread_of or t.parent
        if owner is None:
            return label
        if owner not in specs:
            raise ScenarioInvalid(f"task {label} refers to unknown task {owner}")
        return app_of(owner, seen + (label,))

    for t in scenario.tasks:
        if t.thread_of:
            owner = specs.get(t.thread_of)
            if owner is None or owner.thread_of:
                raise ScenarioInvalid(f"thread {t.label} must belong to a process")
            pid = ids[t.thread_of]
            ppid = ids[owner.parent] if owner.parent else 1
            if t.mem_schedule:
                raise ScenarioInvalid(f"thread {t.label} cannot own private memory")
        else:
            pid = ids[t.label]
            ppid = ids[t.parent] if t.parent else 1
        infos[t.label] = TaskInfo(t.label, app_of(t.label), pid, ids[t.label], ppid,
                                  "thread" if t.thread_of else "process")
    return infos


class _TaskState:
    __slots__ = ("spec", "info", "k0", "k1", "cpu", "segments", "idle", "mem", "num", "den",
                 "step", "seg", "ticks", "socket", "cpu_index", "order")

    def __init__(self, spec: TaskSpec, info: TaskInfo, k0: int, k1: int, n: int, order: int,
                 period: Fraction):
        self.spec = spec
        self.info = info
        self.k0 = k0
        self.k1 = k1
        self.cpu = _Schedule(spec.cpu_schedule, (0.0,) * n, period)
        self.segments = [_CpuSegment(v, spec.label) for v in self.cpu.values]
        self.idle = _CpuSegment((0.0,) * n, spec.label)
        self.mem = _Schedule(spec.mem_schedule, (0,) * n, period)
        for v in self.mem.values:
            if len(v) != n or min(v) < 0:
                raise ScenarioInvalid(f"task {spec.label} memory schedule needs {n} non-negative entries")
        for v in self.cpu.values:
            if len(v) != n:
                raise ScenarioInvalid(f"task {spec.label} cpu schedule needs {n} entries")
        self.num = 0
        self.den = 1
        self.step = 0
        self.seg = None
        self.ticks = 0
        self.order = order
        first = next((i for i, u in enumerate(self.cpu.values[0]) if u), 0) if self.cpu.values else 0
        self.socket = first
        self.cpu_index = None


def iter_simulation(scenario: Scenario, with_truth: bool = True) -> Iterator[tuple]:
    """Yield ``(frame, truth_row)`` for each frame; ``truth_row`` is None for frame 0.

    A truth row is ``(interval, task_cpu, task_dram, socket_totals)``.
    """
    topo = scenario.topology
    n = topo.socket_count
    clk = topo.clk_tck
    P = _frac(scenario.frame_period)
    if P <= 0:
        raise ScenarioInvalid("frame_period must be positive")
    N = _grid(scenario.duration, P, "duration")
    if N < 2:
        raise ScenarioInvalid("duration must cover at least two frame periods")
    for name in ("static_power", "dyn_cpu_coeff", "dyn_dram_coeff"):
        if len(getattr(scenario, name)) != n:
            raise ScenarioInvalid(f"{name} needs one entry per socket")
    node_total = list(scenario.node_mem_total) or [32 * GIB] * n
    if len(node_total) != n or min(node_total) <= 0:
        raise ScenarioInvalid("node_mem_total needs one positive entry per socket")
    if min(scenario.dyn_cpu_coeff) < 0 or min(scenario.dyn_dram_coeff) < 0:
        raise ScenarioInvalid("power coefficients must be >= 0")

    ncpu = topo.cpu_counts()
    cpus = [topo.cpus_of(s) for s in range(n)]
    rng = random.Random(scenario.seed)
    infos = _layout(scenario)

    # per-socket integer energy units: numerator over den_s
    st_pkg = [_frac(p[0]) * P for p in scenario.static_power]
    st_dram = [_frac(p[1]) * P for p in scenario.static_power]
    e_tick = [_frac(scenario.dyn_cpu_coeff[s]) / (ncpu[s] * clk) for s in range(n)]
    e_byte = [_frac(scenario.dyn_dram_coeff[s]) * P / node_total[s] for s in range(n)]
    den = [_lcm(st_pkg[s].denominator, st_dram[s].denominator, e_tick[s].denominator,
                e_byte[s].denominator) for s in range(n)]
    st_pkg_i = [int(st_pkg[s] * den[s]) for s in range(n)]
    st_dram_i = [int(st_dram[s] * den[s]) for s in range(n)]
    e_tick_i = [int(e_tick[s] * den[s]) for s in range(n)]
    e_byte_i = [int(e_byte[s] * den[s]) for s in range(n)]
    linear = scenario.linear
    expo = scenario.cpu_power_exponent

    max_uj = int(scenario.rapl_max_uj)
    offsets = {(s, d): rng.randrange(max_uj) for s in range(n) for d in (PACKAGE, DRAM)}
    cum = {(s, d): 0 for s in range(n) for d in (PACKAGE, DRAM)}  # numerators
    cum_float_pkg = [0.0] * n  # nonlinear package dynamic, not exact
    last_uj = {key: 0 for key in cum}
    host_ticks = [0] * n
    wraps = 0

    states = []
    for order, t in enumerate(scenario.tasks):
        k0 = _grid(t.start, P, f"start of {t.label}")
        k1 = N if t.end is None else min(N, _grid(t.end, P, f"end of {t.label}"))
        if k1 <= k0:
            raise ScenarioInvalid(f"task {t.label} lives less than one frame period")
        states.append(_TaskState(t, infos[t.label], k0, k1, n, order, P))

    def ts(k):
        return float(k * P)

    def counters(k, t_now):
        nonlocal wraps
        out = []
        for s in range(n):
            for d in (PACKAGE, DRAM):
                if d == PACKAGE and not linear:
                    energy_uj = math.floor((Fraction(cum[(s, d)], den[s]) * 1_000_000)
                                           + Fraction(cum_float_pkg[s]) * 1_000_000)
                else:
                    energy_uj = cum[(s, d)] * 1_000_000 // den[s]
                inc = energy_uj - last_uj[(s, d)]
                if inc >= max_uj:
                    raise ScenarioInvalid(
                        f"socket {s} {d} accrues {inc} uJ in one frame, at or above the counter range "
                        f"{max_uj} uJ; wraps would be ambiguous"
                    )
                before = (offsets[(s, d)] + last_uj[(s, d)]) % max_uj
                last_uj[(s, d)] = energy_uj
                value = (offsets[(s, d)] + energy_uj) % max_uj
                if value < before:
                    wraps += 1
                out.append(RaplReading(s, d, value, max_uj))
        return tuple(out)

    zero_mem = (0,) * n
    dram_cache: dict = {}
    cpu_cache: dict = {}

    def mem_of(st, m):
        return st.mem.at(m) if st.spec.mem_schedule else zero_mem

    def dram_truth(m):
        v = dram_cache.get(m)
        if v is None:
            v = dram_cache[m] = tuple(e_byte_i[s] * m[s] / den[s] for s in range(n))
        return v

    def cpu_truth(s, d):
        v = cpu_cache.get((s, d))
        if v is None:
            row = [0.0] * n
            row[s] = e_tick_i[s] * d / den[s]
            v = cpu_cache[(s, d)] = tuple(row)
        return v

    # frame 0
    tasks0 = []
    numa0 = []
    used0 = [0] * n
    t0 = 0
    for st in states:
        if st.k0 == 0:
            tasks0.append(_reading(st, cpus))
            if st.info.kind == "process":
                m = mem_of(st, t0)
                for s in range(n):
                    if m[s]:
                        numa0.append(NumaMemReading(st.info.pid, s, int(m[s])))
                        used0[s] += int(m[s])
    for s in range(n):
        numa0.append(NumaMemReading(None, s, 0, used0[s], node_total[s]))
    frame0 = TelemetryFrame(0.0, counters(0, 0.0), tuple(tasks0), tuple(numa0), tuple(host_ticks))
    yield frame0, None

    for k in range(1, N + 1):
        mid = 2 * k - 1
        socket_ticks = [0] * n
        util_check = [0.0] * n
        task_cpu = {}
        task_dram = {}
        alive = []
        used = [0] * n
        for st in states:
            if not (st.k0 < k <= st.k1):
                if st.k0 == k:
                    alive.append(st)  # born at this frame boundary, no ticks yet
                continue
            i = st.cpu.index(mid)
            seg = st.segments[i] if i >= 0 else st.idle
            for s in seg.nz:
                util_check[s] += seg.u[s]
            if st.seg is not seg:
                # re-express cumulative ticks over the new segment's step
                c = Fraction(st.num, st.den)
                inc = seg.total * P * clk
                st.den = _lcm(c.denominator, inc.denominator)
                st.num = int(c * st.den)
                st.step = int(inc * st.den)
                st.seg = seg
            st.num += st.step
            new_ticks = st.num // st.den
            d_ticks = new_ticks - st.ticks
            st.ticks = new_ticks
            if len(seg.nz) == 1:
                st.socket = seg.nz[0]
            elif len(seg.nz) > 1:
                st.socket = rng.choices(seg.nz, weights=seg.weights)[0]
            socket_ticks[st.socket] += d_ticks
            if with_truth and d_ticks and linear:
                task_cpu[st.spec.label] = cpu_truth(st.socket, d_ticks)
            if st.info.kind == "process":
                m = mem_of(st, mid)
                if any(m):
                    for s in range(n):
                        used[s] += m[s]
                    if with_truth:
                        task_dram[st.spec.label] = dram_truth(m)
            alive.append(st)
        for s in range(n):
            if util_check[s] > ncpu[s] + 1e-9:
                raise ScenarioInvalid(
                    f"socket {s} oversubscribed at t={float(mid * P / 2):.6g} s: "
                    f"{util_check[s]:.6g} CPUs requested, {ncpu[s]} available"
                )
            if used[s] > node_total[s]:
                raise ScenarioInvalid(
                    f"node {s} memory oversubscribed at t={float(mid * P / 2):.6g} s: "
                    f"{used[s]} > {node_total[s]} B"
                )
        # energy
        pkg_dyn = [0.0] * n
        for s in range(n):
            host_ticks[s] += socket_ticks[s]
            if linear:
                cum[(s, PACKAGE)] += st_pkg_i[s] + e_tick_i[s] * socket_ticks[s]
            else:
                cum[(s, PACKAGE)] += st_pkg_i[s]
                util = socket_ticks[s] / (ncpu[s] * float(P) * clk)
                pkg_dyn[s] = scenario.dyn_cpu_coeff[s] * util ** expo * float(P)
                cum_float_pkg[s] += pkg_dyn[s]
            cum[(s, DRAM)] += st_dram_i[s] + e_byte_i[s] * used[s]
        t_now = ts(k)
        tasks = []
        numa = []
        for st in alive:
            tasks.append(_reading(st, cpus))
            if st.info.kind == "process" and st.k0 < k:
                # a process born at this boundary has no resident memory yet
                m = mem_of(st, mid)
                for s in range(n):
                    if m[s]:
                        numa.append(NumaMemReading(st.info.pid, s, int(m[s])))
        for s in range(n):
            numa.append(NumaMemReading(None, s, 0, used[s], node_total[s]))
        frame = TelemetryFrame(t_now, counters(k, t_now), tuple(tasks), tuple(numa), tuple(host_ticks))
        row = None
        if with_truth:
            sock = {
                "cpu_static_j": [float(st_pkg[s]) for s in range(n)],
                "cpu_dyn_j": [e_tick_i[s] * socket_ticks[s] / den[s] if linear
                              else pkg_dyn[s] for s in range(n)],
                "dram_static_j": [float(st_dram[s]) for s in range(n)],
                "dram_dyn_j": [e_byte_i[s] * used[s] / den[s] for s in range(n)],
            }
            row = ((ts(k - 1), t_now), task_cpu, task_dram, sock)
        yield frame, row
    logger.debug("scenario %s: %d frames, %d counter wraps", scenario.name, N + 1, wraps)
    iter_simulation.last_wraps = wraps


def _reading(st: _TaskState, cpus) -> TaskCpuReading:
    on = cpus[st.socket]
    cpu = on[st.order % len(on)]
    stime = st.ticks // 10
    return TaskCpuReading(st.info.pid, st.info.tid, st.info.ppid, st.ticks - stime, stime, cpu)


@dataclass
class Simulation:
    scenario: Scenario
    topology: Topology
    frames: List[TelemetryFrame]
    truth: Optional[GroundTruth]
    wraps: int = 0


def _new_truth(scenario: Scenario) -> GroundTruth:
    return GroundTruth(scenario.name, scenario.digest(), scenario.linear, scenario.static_power,
                       _layout(scenario), scenario.topology.socket_count)


def simulate(scenario: Scenario, with_truth: bool = True) -> Simulation:
    """Run the generator in memory."""
    truth = _new_truth(scenario) if with_truth else None
    frames = []
    for frame, row in iter_simulation(scenario, with_truth):
        frames.append(frame)
        if row is not None and truth is not None:
            truth._append(*row)
    return Simulation(scenario, scenario.topology, frames, truth, iter_simulation.last_wraps)


@dataclass
class GenerationSummary:
    trace_path: Path
    truth_path: Optional[Path]
    frames: int
    wraps: int
    tasks: int
    apps: int


def generate_trace(scenario: Scenario, out_dir, with_truth: bool = True,
                   stem: Optional[str] = None) -> GenerationSummary:
    """Write ``<stem>.trace.jsonl`` and ``<stem>.truth.jsonl`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = stem or f"{scenario.name}-s{scenario.seed}"
    trace_path = out / f"{stem}.trace.jsonl"
    truth_path = out / f"{stem}.truth.jsonl" if with_truth else None
    truth = _new_truth(scenario) if with_truth else None
    source = {"scenario": scenario.name, "seed": scenario.seed, "digest": scenario.digest()}
    with TraceWriter(trace_path, scenario.topology, source=source) as w:
        for frame, row in iter_simulation(scenario, with_truth):
            w.write_raw(encode_frame(frame))
            if row is not None and truth is not None:
                truth._append(*row)
        frames = w.frames
    if truth is not None:
        truth.write(truth_path)
    infos = _layout(scenario)
    return GenerationSummary(trace_path, truth_path, frames, iter_simulation.last_wraps,
                             len(infos), len({i.app for i in infos.values()}))


# --- presets --------------------------------------------------------------------

PRESETS = ("cpu-sweep", "mem-sweep", "mix", "mix-neighbor")

# dual-socket host, 16 logical CPUs and 32 GiB per node
TESTBED = dict(sockets=2, cpus_per_socket=16, node_bytes=32 * GIB, clk_tck=100)
# package static dominates the dynamic range; per-tick and per-GiB energies
# come out as whole microjoules at 10 ms frames so truth survives quantization
STATIC_W = (40.0, 6.0)
DYN_CPU_W = 16.0
DYN_DRAM_W = 8.0


def _testbed_scenario(name, tasks, duration, period, seed) -> Scenario:
    topo = Topology.uniform(TESTBED["sockets"], TESTBED["cpus_per_socket"], TESTBED["clk_tck"])
    n = topo.socket_count
    return Scenario(
        topology=topo, duration=duration, frame_period=period,
        static_power=[STATIC_W] * n, dyn_cpu_coeff=[DYN_CPU_W] * n,
        dyn_dram_coeff=[DYN_DRAM_W] * n, node_mem_total=[TESTBED["node_bytes"]] * n,
        tasks=tasks, seed=seed, name=name,
    )


def _one_hot(n, s, v):
    out = [0] * n if isinstance(v, int) else [0.0] * n
    out[s] = v
    return tuple(out)


def _mix_app(prefix: str, n_sockets=2, per_socket_procs=4, mem_per_proc=4 * GIB):
    """Processes with one thread each, every task busy on one CPU."""
    tasks = []
    root = f"{prefix}"
    for s in range(n_sockets):
        for i in range(per_socket_procs):
            label = root if (s == 0 and i == 0) else f"{prefix}.p{s}{i}"
            tasks.append(TaskSpec(label, parent=None if label == root else root,
                                  cpu_schedule=[(0.0, _one_hot(n_sockets, s, 1.0))],
                                  mem_schedule=[(0.0, _one_hot(n_sockets, s, mem_per_proc))]))
            tasks.append(TaskSpec(f"{label}.t", kind=f"thread-of:{label}",
                                  cpu_schedule=[(0.0, _one_hot(n_sockets, s, 1.0))]))
    return tasks


def preset(name: str, duration: float = 60.0, frame_period: float = 0.01, seed: int = 0) -> Scenario:
    """Desk-scale versions of the four microbenchmarks.

    ``cpu-sweep``: 16 processes and 16 threads ramp from idle to every CPU
    busy in 11 equal steps. ``mem-sweep``: one process grows its private
    memory on both nodes from 0 to the full node in 1 GiB steps.
    ``mix``: CPU and memory held at 50%. ``mix-neighbor``: ``mix`` plus an
    identical second application.
    """
    n = TESTBED["sockets"]
    if name == "cpu-sweep":
        steps = 11
        sched = [(duration * i / steps, i / (steps - 1)) for i in range(steps)]
        tasks = []
        per_socket = TESTBED["cpus_per_socket"] // 2
        for s in range(n):
            for i in range(per_socket):
                label = "cpu" if (s == 0 and i == 0) else f"cpu.p{s}{i}"
                cpu_sched = [(t, _one_hot(n, s, u)) for t, u in sched]
                tasks.append(TaskSpec(label, parent=None if label == "cpu" else "cpu",
                                      cpu_schedule=cpu_sched,
                                      mem_schedule=[(0.0, _one_hot(n, s, 256 * MIB))]))
                tasks.append(TaskSpec(f"{label}.t", kind=f"thread-of:{label}", cpu_schedule=cpu_sched))
        return _testbed_scenario(name, tasks, duration, frame_period, seed)
    if name == "mem-sweep":
        levels = TESTBED["node_bytes"] // GIB + 1
        mem = [(duration * i / levels, (i * GIB,) * n) for i in range(levels)]
        tasks = [TaskSpec("mem", cpu_schedule=[(0.0, _one_hot(n, 0, 1.0))], mem_schedule=mem)]
        return _testbed_scenario(name, tasks, duration, frame_period, seed)
    if name == "mix":
        return _testbed_scenario(name, _mix_app("target"), duration, frame_period, seed)
    if name == "mix-neighbor":
        return _testbed_scenario(name, _mix_app("target") + _mix_app("neighbor"),
                                 duration, frame_period, seed)
    raise ValueError(f"unknown preset {name!r}; valid presets: {', '.join(PRESETS)}")


def load_scenario(path) -> Scenario:
    with open(path, "r", encoding="utf-8") as f:
        return Scenario.from_json(json.load(f))


# --- comparison -----------------------------------------------------------------

@dataclass
class TruthError:
    label: str
    device: str
    interval: int
    attributed: float
    truth: float

    @property
    def abs_error(self) -> float:
        return abs(self.attributed - self.truth)

    @property
    def rel_error(self) -> float:
        if self.truth == 0:
            return self.abs_error
        return self.abs_error / abs(self.truth)


@dataclass
class TruthReport:
    rows: List[TruthError]
    granularity: str

    @property
    def max_rel_error(self) -> float:
        return max((r.rel_error for r in self.rows), default=0.0)

    @property
    def mean_rel_error(self) -> float:
        if not self.rows:
            return 0.0
        return float(np.mean([r.rel_error for r in self.rows]))

    @property
    def max_abs_error(self) -> float:
        return max((r.abs_error for r in self.rows), default=0.0)


class LabelMismatch(ValueError):
    pass


def ground_truth_compare(records, truth: GroundTruth) -> TruthReport:
    """Per task (``task:<tid>`` records) or per application (``pid:<root>``) error report.

    Attributed dynamic energy is compared with the generator's truth for
    every interval and device.
    """
    by_tid = {info.tid: label for label, info in truth.tasks.items()}
    roots = {pid: app for app, pid in truth.app_roots().items()}
    apps = truth.apps()
    index = {iv: i for i, iv in enumerate(truth.intervals)}
    cache_cpu = {}
    cache_dram = {}

    def series(label):
        if label not in cache_cpu:
            cache_cpu[label] = truth.task_cpu(label).sum(axis=1)
            cache_dram[label] = truth.task_dram(label).sum(axis=1)
        return cache_cpu[label], cache_dram[label]

    rows = []
    granularity = None
    seen_intervals = set()
    for rec in records:
        kind, _, ident = rec.app.partition(":")
        if kind == "task" and int(ident) in by_tid:
            labels = [by_tid[int(ident)]]
            g = "task"
        elif kind == "pid" and int(ident) in roots:
            labels = apps[roots[int(ident)]]
            g = "app"
        else:
            raise LabelMismatch(f"record for {rec.app} has no counterpart in truth for scenario {truth.scenario}")
        granularity = granularity or g
        i = index.get((rec.t0, rec.t1))
        if i is None:
            raise LabelMismatch(f"interval ({rec.t0}, {rec.t1}) not in truth for scenario {truth.scenario}")
        seen_intervals.add(i)
        cpu = math.fsum(series(l)[0][i] for l in labels)
        dram = math.fsum(series(l)[1][i] for l in labels)
        name = labels[0] if g == "task" else roots[int(ident)]
        rows.append(TruthError(name, "cpu", i, rec.cpu_dynamic, cpu))
        rows.append(TruthError(name, "dram", i, rec.dram_dynamic, dram))
    if len(seen_intervals) != len(truth.intervals):
        raise LabelMismatch(
            f"records cover {len(seen_intervals)} intervals, truth has {len(truth.intervals)}"
        )
    return TruthReport(rows, granularity or "task")
