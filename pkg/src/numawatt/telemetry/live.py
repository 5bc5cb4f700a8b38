"""Live Linux counters: RAPL via powercap sysfs, tasks via procfs, NUMA via sysfs.

Every path is resolved under a root prefix (``NUMAWATT_SYS_ROOT``, default
``/``) so the reader can run against a fake tree in tests.
"""

from __future__ import annotations

import logging
import os
import queue
import re
import threading
import time
from pathlib import Path
from typing import Iterable, Iterator, Optional

from ..errors import TaskVanished, UnsupportedPlatform
from .frames import DRAM, PACKAGE, NumaMemReading, RaplReading, TelemetryFrame, Topology
from .procfs import parse_cpulist, parse_node_meminfo, parse_numa_maps, parse_proc_stat, parse_task_stat
from .tasks import INIT_PID, KTHREADD_PID

logger = logging.getLogger(__name__)

SYS_ROOT_ENV = "NUMAWATT_SYS_ROOT"
ALL_JOBS = "all-jobs"
_ZONE = re.compile(r"^intel-rapl:(\d+)$")
_SUBZONE = re.compile(r"^intel-rapl:(\d+):(\d+)$")
# used when a socket exposes no DRAM domain; the counter never moves
_NO_DRAM_MAX = 1 << 32


def sys_root(root: Optional[str] = None) -> Path:
    return Path(root if root is not None else os.environ.get(SYS_ROOT_ENV, "/"))


def _read(path: Path) -> str:
    with open(path, "r") as f:
        return f.read()


def discover_topology(root: Optional[str] = None) -> Topology:
    base = sys_root(root) / "sys/devices/system/node"
    cpu_map = {}
    nodes = sorted(
        (int(p.name[4:]), p) for p in base.glob("node[0-9]*") if p.name[4:].isdigit()
    ) if base.is_dir() else []
    for node, p in nodes:
        try:
            for cpu in parse_cpulist(_read(p / "cpulist")):
                cpu_map[cpu] = node
        except FileNotFoundError:
            continue
    if not cpu_map:
        n = os.cpu_count() or 1
        cpu_map = {c: 0 for c in range(n)}
    sockets = max(cpu_map.values()) + 1
    clk = os.sysconf("SC_CLK_TCK") if hasattr(os, "sysconf") else 100
    return Topology(sockets, cpu_map, int(clk))


def cpu_model(root: Optional[str] = None) -> str:
    try:
        for line in _read(sys_root(root) / "proc/cpuinfo").splitlines():
            if line.startswith("model name"):
                return line.split(":", 1)[1].strip()
    except OSError:
        pass
    return "unknown"


class RaplFiles:
    """Locates package/DRAM energy counters and their wrap ranges."""

    def __init__(self, root: Optional[str], socket_count: int):
        base = sys_root(root) / "sys/class/powercap"
        self.files = {}  # (socket, domain) -> (energy path, max range)
        if not base.is_dir():
            raise UnsupportedPlatform(f"no RAPL powercap interface at {base}")
        for zone in sorted(base.iterdir()):
            m = _ZONE.match(zone.name)
            if not m:
                continue
            socket = self._socket_of(zone, int(m.group(1)))
            self._add(socket, PACKAGE, zone)
            for sub in sorted(zone.iterdir()):
                if _SUBZONE.match(sub.name) and self._name(sub) == "dram":
                    self._add(socket, DRAM, sub)
        if not any(d == PACKAGE for _, d in self.files):
            raise UnsupportedPlatform(f"no RAPL package domains under {base}")
        for s in range(socket_count):
            if (s, PACKAGE) not in self.files:
                raise UnsupportedPlatform(f"no RAPL package domain for socket {s}")
            if (s, DRAM) not in self.files:
                logger.warning("socket %d exposes no RAPL DRAM domain; DRAM energy reads as 0", s)

    @staticmethod
    def _name(zone: Path) -> str:
        try:
            return _read(zone / "name").strip()
        except OSError:
            return ""

    def _socket_of(self, zone: Path, index: int) -> int:
        name = self._name(zone)
        if name.startswith("package-"):
            return int(name.split("-", 1)[1])
        return index

    def _add(self, socket: int, domain: str, zone: Path) -> None:
        energy = zone / "energy_uj"
        try:
            max_uj = int(_read(zone / "max_energy_range_uj"))
            _read(energy)
        except PermissionError:
            raise UnsupportedPlatform(
                f"permission denied reading {energy}; RAPL energy files need root "
                "(or CAP_SYS_ADMIN / a chmod on energy_uj)"
            ) from None
        self.files[(socket, domain)] = (energy, max_uj)

    def read(self, socket_count: int, ts: float) -> tuple:
        out = []
        for s in range(socket_count):
            for domain in (PACKAGE, DRAM):
                entry = self.files.get((s, domain))
                if entry is None:
                    out.append(RaplReading(s, domain, 0, _NO_DRAM_MAX, ts))
                    continue
                path, max_uj = entry
                out.append(RaplReading(s, domain, int(_read(path)), max_uj, ts))
        return tuple(out)


class LiveReader:
    """Reads one coherent :class:`TelemetryFrame` from the running host.

    ``targets`` is a list of root pids or ``"all-jobs"``; ``extra_pids``
    (normally the engine itself) are always traced.
    """

    def __init__(self, topology: Topology, targets, root: Optional[str] = None,
                 extra_pids: Iterable[int] = ()):
        self.topology = topology
        self.root = sys_root(root)
        self.proc = self.root / "proc"
        self.targets = targets
        self.extra_pids = list(extra_pids)
        self.rapl = RaplFiles(root, topology.socket_count)

    def _process_table(self) -> dict:
        table = {}
        for entry in os.scandir(self.proc):
            if not entry.name.isdigit():
                continue
            try:
                r = parse_task_stat(_read(Path(entry.path) / "stat"))
            except (FileNotFoundError, ProcessLookupError):
                continue
            table[r.pid] = r.ppid
        return table

    def _traced_pids(self) -> list:
        table = self._process_table()
        if self.targets == ALL_JOBS:
            return sorted(p for p, pp in table.items()
                          if p not in (0, KTHREADD_PID) and pp != KTHREADD_PID)
        children = {}
        for p, pp in table.items():
            children.setdefault(pp, []).append(p)
        out = set()
        stack = [p for p in list(self.targets) + self.extra_pids if p in table]
        while stack:
            p = stack.pop()
            if p in out:
                continue
            out.add(p)
            if p != INIT_PID:
                stack.extend(children.get(p, ()))
        return sorted(out)

    def _read_tasks(self, pid: int) -> list:
        task_dir = self.proc / str(pid) / "task"
        out = []
        try:
            tids = sorted(int(n) for n in os.listdir(task_dir) if n.isdigit())
        except (FileNotFoundError, ProcessLookupError):
            raise TaskVanished(pid) from None
        for tid in tids:
            try:
                out.append(parse_task_stat(_read(task_dir / str(tid) / "stat"), pid=pid))
            except (FileNotFoundError, ProcessLookupError):
                continue
        return out

    def read_frame(self) -> TelemetryFrame:
        ts = time.monotonic()
        n = self.topology.socket_count
        rapl = self.rapl.read(n, ts)
        per_cpu = parse_proc_stat(_read(self.proc / "stat"))
        cpu_ticks = tuple(per_cpu.get(c, 0) for c in sorted(self.topology.cpu_to_socket))
        host = [0] * n
        for cpu, ticks in per_cpu.items():
            s = self.topology.cpu_to_socket.get(cpu)
            if s is not None:
                host[s] += ticks
        tasks = []
        numa = []
        for pid in self._traced_pids():
            try:
                rows = self._read_tasks(pid)
            except TaskVanished:
                continue
            if not rows:
                continue
            tasks.extend(rows)
            try:
                private = parse_numa_maps(_read(self.proc / str(pid) / "numa_maps"), n)
            except (FileNotFoundError, ProcessLookupError, PermissionError):
                private = [0] * n
            for node, b in enumerate(private):
                if b:
                    numa.append(NumaMemReading(pid, node, b))
        node_dir = self.root / "sys/devices/system/node"
        for node in range(n):
            try:
                info = parse_node_meminfo(_read(node_dir / f"node{node}" / "meminfo"))
            except FileNotFoundError:
                continue
            total = info.get("MemTotal", 0)
            used = info.get("MemUsed", total - info.get("MemFree", 0))
            numa.append(NumaMemReading(None, node, 0, used, total))
        return TelemetryFrame(ts, rapl, tuple(tasks), tuple(numa), tuple(host), cpu_ticks)


def read_live_frame(topology: Topology, targets=ALL_JOBS, root: Optional[str] = None) -> TelemetryFrame:
    return LiveReader(topology, targets, root).read_frame()


class LiveSource:
    """Daemon sampler thread feeding frames into a bounded queue.

    Iterating the source yields frames in order until ``duration`` seconds
    have been covered or :meth:`stop` is called.
    """

    def __init__(self, reader: LiveReader, period: float, duration: Optional[float] = None,
                 maxsize: int = 256):
        self.reader = reader
        self.period = period
        self.duration = duration
        self._q: queue.Queue = queue.Queue(maxsize=maxsize)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, name="numawatt-sampler", daemon=True)
        self.topology = reader.topology

    def _run(self):
        start = time.monotonic()
        k = 0
        try:
            while not self._stop.is_set():
                self._q.put(self.reader.read_frame())
                k += 1
                if self.duration is not None and k * self.period > self.duration + 1e-9:
                    break
                delay = start + k * self.period - time.monotonic()
                if delay > 0:
                    self._stop.wait(delay)
        except Exception as e:  # handed to the consumer
            self._q.put(e)
        self._q.put(None)

    @property
    def native_thread_id(self) -> Optional[int]:
        return self._thread.native_id

    def start(self) -> "LiveSource":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()

    def __iter__(self) -> Iterator[TelemetryFrame]:
        if not self._thread.is_alive() and self._thread.ident is None:
            self.start()
        while True:
            item = self._q.get()
            if item is None:
                return
            if isinstance(item, Exception):
                raise item
            yield item
