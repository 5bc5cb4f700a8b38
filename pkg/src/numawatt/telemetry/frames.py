"""Immutable snapshot types shared by the live reader, the trace codec and the engine."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, NamedTuple, Optional, Tuple

PACKAGE = "package"
DRAM = "dram"
DOMAINS = (PACKAGE, DRAM)


class TaskId(NamedTuple):
    pid: int
    tid: int
    is_thread_of: Optional[int] = None


class RaplReading(NamedTuple):
    socket: int
    domain: str
    uj: int
    max_uj: int
    timestamp: Optional[float] = None


class TaskCpuReading(NamedTuple):
    pid: int
    tid: int
    ppid: int
    utime: int
    stime: int
    cpu: int
    state: str = "R"

    @property
    def task_id(self) -> TaskId:
        return TaskId(self.pid, self.tid, self.pid if self.tid != self.pid else None)

    @property
    def is_thread(self) -> bool:
        return self.tid != self.pid

    @property
    def ticks(self) -> int:
        return self.utime + self.stime

    def cpu_seconds(self, clk_tck: int) -> float:
        return (self.utime + self.stime) / clk_tck

    def user_seconds(self, clk_tck: int) -> float:
        return self.utime / clk_tck

    def system_seconds(self, clk_tck: int) -> float:
        return self.stime / clk_tck


class NumaMemReading(NamedTuple):
    """Per-node memory row. ``pid is None`` marks the host-wide row."""

    pid: Optional[int]
    node: int
    private_b: int
    used_b: int = 0
    total_b: int = 0


@dataclass(frozen=True)
class Topology:
    socket_count: int
    cpu_to_socket: Dict[int, int]
    clk_tck: int = 100

    def __post_init__(self):
        if self.socket_count < 1:
            raise ValueError("socket_count must be positive")
        if self.clk_tck <= 0:
            raise ValueError("clk_tck must be positive")
        for cpu, s in self.cpu_to_socket.items():
            if not 0 <= s < self.socket_count:
                raise ValueError(f"cpu {cpu} maps to socket {s} outside 0..{self.socket_count - 1}")

    @classmethod
    def uniform(cls, sockets: int, cpus_per_socket: int, clk_tck: int = 100) -> "Topology":
        cpu_map = {c: c // cpus_per_socket for c in range(sockets * cpus_per_socket)}
        return cls(sockets, cpu_map, clk_tck)

    def cpus_of(self, socket: int) -> list:
        return sorted(c for c, s in self.cpu_to_socket.items() if s == socket)

    def cpu_counts(self) -> list:
        counts = [0] * self.socket_count
        for s in self.cpu_to_socket.values():
            counts[s] += 1
        return counts

    def to_json(self) -> dict:
        return {
            "sockets": self.socket_count,
            "cpu_map": [self.cpu_to_socket[c] for c in sorted(self.cpu_to_socket)],
            "clk_tck": self.clk_tck,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Topology":
        cpu_map = obj["cpu_map"]
        if isinstance(cpu_map, dict):
            mapping = {int(k): int(v) for k, v in cpu_map.items()}
        else:
            mapping = {i: int(s) for i, s in enumerate(cpu_map)}
        return cls(int(obj["sockets"]), mapping, int(obj["clk_tck"]))


@dataclass(frozen=True)
class TelemetryFrame:
    timestamp: float
    rapl: Tuple[RaplReading, ...]
    tasks: Tuple[TaskCpuReading, ...]
    numa: Tuple[NumaMemReading, ...]
    host_ticks: Tuple[int, ...]
    # per logical CPU busy ticks; live frames only, used for self-pinning
    cpu_ticks: Optional[Tuple[int, ...]] = None

    def rapl_map(self) -> dict:
        return {(r.socket, r.domain): r for r in self.rapl}

    def task_map(self) -> dict:
        return {t.tid: t for t in self.tasks}
