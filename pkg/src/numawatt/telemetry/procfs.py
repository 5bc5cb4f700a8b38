"""Parsers for the text formats under /proc and /sys.

All parsers take the file contents as a string so they can be tested
without a live kernel.
"""

from __future__ import annotations

import re

from ..errors import StatParseError
from .frames import TaskCpuReading

# 0-based indexes into the fields that follow "pid (comm)"
_STATE = 0
_PPID = 1
_UTIME = 11
_STIME = 12
_PROCESSOR = 36


def parse_task_stat(raw_line: str, pid: int | None = None) -> TaskCpuReading:
    """Parse one ``/proc/<pid>/task/<tid>/stat`` line.

    ``comm`` may contain spaces and parentheses, so the line is split at
    the *last* closing parenthesis. ``pid`` is the owning process (the
    stat line only carries the task id); it defaults to the task id.
    """
    line = raw_line.strip()
    open_ = line.find("(")
    close = line.rfind(")")
    if open_ < 0 or close < open_:
        raise StatParseError(f"stat line without comm field: {line[:60]!r}")
    try:
        tid = int(line[:open_])
    except ValueError:
        raise StatParseError(f"bad task id in stat line: {line[:60]!r}") from None
    rest = line[close + 1:].split()
    if len(rest) <= _PROCESSOR:
        raise StatParseError(f"task {tid}: stat line has {len(rest) + 2} fields, need 39")
    try:
        return TaskCpuReading(
            pid=tid if pid is None else pid,
            tid=tid,
            ppid=int(rest[_PPID]),
            utime=int(rest[_UTIME]),
            stime=int(rest[_STIME]),
            cpu=int(rest[_PROCESSOR]),
            state=rest[_STATE],
        )
    except ValueError as e:
        raise StatParseError(f"task {tid}: {e}") from None


def stat_comm(raw_line: str) -> str:
    return raw_line[raw_line.find("(") + 1: raw_line.rfind(")")]


def parse_cpulist(text: str) -> list:
    """Expand a kernel cpulist such as ``0-3,8,10-11``."""
    cpus = []
    text = text.strip()
    if not text:
        return cpus
    for part in text.split(","):
        if "-" in part:
            lo, hi = part.split("-")
            cpus.extend(range(int(lo), int(hi) + 1))
        else:
            cpus.append(int(part))
    return cpus


def parse_proc_stat(text: str) -> dict:
    """Busy ticks (user+nice+system+irq+softirq+steal) per logical CPU."""
    out = {}
    for line in text.splitlines():
        if not line.startswith("cpu") or line.startswith("cpu "):
            continue
        f = line.split()
        vals = [int(x) for x in f[1:9]] + [0] * 8
        user, nice, system, _idle, _iowait, irq, softirq, steal = vals[:8]
        out[int(f[0][3:])] = user + nice + system + irq + softirq + steal
    return out


_NODE_LINE = re.compile(r"^Node\s+(\d+)\s+(\w+):\s+(\d+)(?:\s+kB)?")


def parse_node_meminfo(text: str) -> dict:
    """``/sys/devices/system/node/nodeN/meminfo`` → {field: bytes}."""
    out = {}
    for line in text.splitlines():
        m = _NODE_LINE.match(line.strip())
        if m:
            mult = 1024 if line.rstrip().endswith("kB") else 1
            out[m.group(2)] = int(m.group(3)) * mult
    return out


def parse_numa_maps(text: str, n_nodes: int) -> list:
    """Private resident bytes per NUMA node from ``/proc/<pid>/numa_maps``.

    A mapping counts as private unless the kernel reports ``mapmax`` > 1
    for it, i.e. some page in it is mapped by more than one process.
    """
    out = [0] * n_nodes
    for line in text.splitlines():
        fields = line.split()
        if len(fields) < 3:
            continue
        page_kb = 4
        shared = False
        per_node = []
        for f in fields[2:]:
            key, sep, val = f.partition("=")
            if not sep:
                continue
            if key == "mapmax":
                shared = int(val) > 1
            elif key == "kernelpagesize_kB":
                page_kb = int(val)
            elif key[0] == "N" and key[1:].isdigit():
                per_node.append((int(key[1:]), int(val)))
        if shared:
            continue
        for node, pages in per_node:
            if node < n_nodes:
                out[node] += pages * page_kb * 1024
    return out
