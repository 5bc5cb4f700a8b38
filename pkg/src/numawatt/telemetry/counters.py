from __future__ import annotations

from ..errors import InvalidTrace
from .frames import DOMAINS, TelemetryFrame, Topology

UJ_PER_J = 1_000_000


def delta_uj_with_overflow(prev: int, curr: int, max_range: int) -> int:
    """Counter advance in µJ, assuming at most one wrap between the two reads.

    RAPL counters wrap to zero after ``max_range``; two wraps in one
    interval cannot be told apart from zero or one.
    """
    if max_range <= 0:
        raise ValueError(f"max_range must be positive, got {max_range}")
    if not (0 <= prev <= max_range and 0 <= curr <= max_range):
        raise ValueError(f"counter values {prev}, {curr} outside [0, {max_range}]")
    if curr >= prev:
        return curr - prev
    return (max_range - prev) + curr


def delta_with_overflow(prev: int, curr: int, max_range: int) -> float:
    """Same as :func:`delta_uj_with_overflow` but in joules."""
    return delta_uj_with_overflow(prev, curr, max_range) / UJ_PER_J


def rapl_deltas(prev: TelemetryFrame, curr: TelemetryFrame, n_sockets: int):
    """Return ``(package_j, dram_j)`` per-socket lists for a frame pair."""
    pkg = [0.0] * n_sockets
    dram = [0.0] * n_sockets
    before = {(r.socket, r.domain): r for r in prev.rapl}
    for r in curr.rapl:
        p = before.get((r.socket, r.domain))
        if p is None:
            raise InvalidTrace(f"RAPL {r.domain} counter for socket {r.socket} missing in previous frame")
        d = delta_uj_with_overflow(p.uj, r.uj, r.max_uj) / UJ_PER_J
        if r.domain == "package":
            pkg[r.socket] = d
        else:
            dram[r.socket] = d
    return pkg, dram


def host_cpu_time_per_socket(prev: TelemetryFrame, curr: TelemetryFrame,
                             topology: Topology) -> list:
    """Busy (user + kernel) CPU seconds per socket between two frames."""
    out = []
    for s, (a, b) in enumerate(zip(prev.host_ticks, curr.host_ticks)):
        if b < a:
            raise InvalidTrace(
                f"host tick counter for socket {s} went backwards ({a} -> {b}); host rebooted mid-trace?"
            )
        out.append((b - a) / topology.clk_tck)
    return out


def check_frame(frame: TelemetryFrame, topology: Topology) -> None:
    """Raise :class:`InvalidTrace` if ``frame`` violates the frame invariants."""
    seen = set()
    for r in frame.rapl:
        key = (r.socket, r.domain)
        if key in seen:
            raise InvalidTrace(f"duplicate RAPL reading for socket {r.socket} {r.domain}")
        seen.add(key)
        if r.domain not in DOMAINS:
            raise InvalidTrace(f"unknown RAPL domain {r.domain!r}")
        if not 0 <= r.socket < topology.socket_count:
            raise InvalidTrace(f"RAPL reading for unknown socket {r.socket}")
        if not (r.max_uj > 0 and 0 <= r.uj <= r.max_uj):
            raise InvalidTrace(f"RAPL counter {r.uj} outside [0, {r.max_uj}]")
    if len(frame.host_ticks) != topology.socket_count:
        raise InvalidTrace(
            f"host_ticks has {len(frame.host_ticks)} entries for {topology.socket_count} sockets"
        )
    cpus = topology.cpu_to_socket
    n_tasks = 0
    for _, tid, _, utime, stime, cpu, _ in frame.tasks:
        n_tasks += 1
        if cpu not in cpus:
            raise InvalidTrace(f"task {tid} placed on unknown CPU {cpu}")
        if utime < 0 or stime < 0:
            raise InvalidTrace(f"task {tid} has negative ticks")
    if n_tasks != len({t[1] for t in frame.tasks}):
        seen_tids = set()
        for t in frame.tasks:
            if t.tid in seen_tids:
                raise InvalidTrace(f"task {t.tid} appears twice in one frame")
            seen_tids.add(t.tid)
    n = topology.socket_count
    for pid, node, private_b, used_b, total_b in frame.numa:
        if not 0 <= node < n:
            raise InvalidTrace(f"NUMA row for unknown node {node}")
        if pid is None and not (0 <= private_b <= used_b <= total_b):
            raise InvalidTrace(f"host NUMA row for node {node} violates private <= used <= total")
