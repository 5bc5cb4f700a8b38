"""Task-tree enumeration over a single frame."""

from __future__ import annotations

from collections import defaultdict

from ..errors import TargetExited
from .frames import TaskId, TelemetryFrame

INIT_PID = 1
KTHREADD_PID = 2


class FrameIndex:
    """Process/thread lookup tables for one frame, built once and shared."""

    __slots__ = ("by_pid", "children", "ppid", "tasks")

    def __init__(self, frame: TelemetryFrame):
        self.tasks = frame.task_map()
        self.by_pid = defaultdict(list)
        self.ppid = {}
        for t in frame.tasks:
            self.by_pid[t.pid].append(t)
            if t.tid == t.pid:
                self.ppid[t.pid] = t.ppid
        self.children = defaultdict(list)
        for pid, ppid in self.ppid.items():
            self.children[ppid].append(pid)
        for kids in self.children.values():
            kids.sort()

    def has_process(self, pid: int) -> bool:
        return pid in self.ppid

    def tree_pids(self, root_pid: int, stop=()) -> list:
        """Root plus every descendant process, not descending into ``stop`` roots."""
        if root_pid not in self.ppid:
            raise TargetExited(f"process {root_pid} is not present")
        out = []
        stack = [root_pid]
        while stack:
            pid = stack.pop()
            out.append(pid)
            for c in self.children.get(pid, ()):
                if c not in stop and c != pid:
                    stack.append(c)
        out.sort()
        return out

    def tree_tids(self, root_pid: int, stop=()) -> list:
        return [t.tid for pid in self.tree_pids(root_pid, stop) for t in self.by_pid[pid]]


def enumerate_tasks(root_pid: int, frame: TelemetryFrame | FrameIndex) -> list:
    """Every task (processes and their threads) in the tree rooted at ``root_pid``."""
    index = frame if isinstance(frame, FrameIndex) else FrameIndex(frame)
    return [index.tasks[tid].task_id for tid in index.tree_tids(root_pid)]


def job_roots(frame: TelemetryFrame | FrameIndex, exclude=()) -> list:
    """Top-level user jobs present in a frame.

    A job root is a process whose parent is not traced or is init. Init
    itself is a one-process job. Kernel threads (kthreadd and its
    children) and any pid in ``exclude`` are left out.
    """
    index = frame if isinstance(frame, FrameIndex) else FrameIndex(frame)
    roots = []
    for pid, ppid in index.ppid.items():
        if pid in exclude or pid == KTHREADD_PID or ppid == KTHREADD_PID or pid == 0:
            continue
        if pid == INIT_PID or ppid == INIT_PID or ppid not in index.ppid or ppid in exclude:
            roots.append(pid)
    roots.sort()
    return roots


__all__ = ["FrameIndex", "TaskId", "enumerate_tasks", "job_roots"]
