"""Line-delimited JSON trace format (version 1).

The first line is a header::

    {"version": 1, "topology": {"sockets": 2, "cpu_map": [0, 0, 1, 1], "clk_tck": 100}}

and every following line is one frame::

    {"ts": 0.01,
     "rapl": [{"socket": 0, "domain": "package", "uj": 123, "max_uj": 262143328850}, ...],
     "host_ticks": [100, 250],
     "tasks": [{"pid": 10, "tid": 11, "ppid": 1, "utime": 5, "stime": 1, "cpu": 3}, ...],
     "numa": [{"pid": null, "node": 0, "private_b": 0, "used_b": 1, "total_b": 2}, ...]}

Everything except ``ts`` is a decimal integer.
"""

from __future__ import annotations

import io
import json
import logging
import os
from operator import itemgetter
from pathlib import Path
from typing import IO, Iterator, Optional

try:
    import orjson
except ImportError:  # pragma: no cover - optional speedup
    orjson = None

from ..errors import InvalidTrace, TraceVersionError
from .counters import check_frame
from .frames import NumaMemReading, RaplReading, TaskCpuReading, TelemetryFrame, Topology

logger = logging.getLogger(__name__)

TRACE_VERSION = 1
SUPPORTED_VERSIONS = (1,)


def encode_header(topology: Topology, **extra) -> str:
    obj = {"version": TRACE_VERSION, "topology": topology.to_json()}
    obj.update(extra)
    return json.dumps(obj, separators=(",", ":"))


def encode_frame(frame: TelemetryFrame) -> str:
    obj = {
        "ts": frame.timestamp,
        "rapl": [{"socket": r.socket, "domain": r.domain, "uj": r.uj, "max_uj": r.max_uj}
                 for r in frame.rapl],
        "host_ticks": list(frame.host_ticks),
        "tasks": [{"pid": t.pid, "tid": t.tid, "ppid": t.ppid, "utime": t.utime,
                   "stime": t.stime, "cpu": t.cpu} for t in frame.tasks],
        "numa": [{"pid": m.pid, "node": m.node, "private_b": m.private_b,
                  "used_b": m.used_b, "total_b": m.total_b} for m in frame.numa],
    }
    if frame.cpu_ticks is not None:
        obj["cpu_ticks"] = list(frame.cpu_ticks)
    return json.dumps(obj, separators=(",", ":"))


_loads = orjson.loads if orjson is not None else json.loads
_rapl_fields = itemgetter("socket", "domain", "uj", "max_uj")
_numa_fields = itemgetter("pid", "node", "private_b", "used_b", "total_b")
_task_fields = itemgetter("pid", "tid", "ppid", "utime", "stime", "cpu")
_tuple_new = tuple.__new__
_NO_TS = (None,)
_RUNNING = ("R",)


def decode_frame(obj: dict) -> TelemetryFrame:
    ts = obj["ts"]
    if not isinstance(ts, (int, float)) or isinstance(ts, bool):
        raise InvalidTrace(f"ts must be a number, got {ts!r}")
    # NamedTuple constructors are slow; build the tuples directly
    rapl = tuple([_tuple_new(RaplReading, f + _NO_TS) for f in map(_rapl_fields, obj["rapl"])])
    tasks = tuple([_tuple_new(TaskCpuReading, f + _RUNNING) for f in map(_task_fields, obj["tasks"])])
    try:
        numa = tuple([_tuple_new(NumaMemReading, f) for f in map(_numa_fields, obj["numa"])])
    except KeyError:
        # used_b / total_b may be omitted on per-process rows
        numa = tuple(
            NumaMemReading(m["pid"], m["node"], m["private_b"], m.get("used_b", 0), m.get("total_b", 0))
            for m in obj["numa"]
        )
    for r in rapl:
        if type(r.uj) is not int or type(r.max_uj) is not int:
            raise InvalidTrace("RAPL counters must be integers")
    cpu_ticks = obj.get("cpu_ticks")
    return TelemetryFrame(
        float(ts), rapl, tasks, numa, tuple(obj["host_ticks"]),
        tuple(cpu_ticks) if cpu_ticks is not None else None,
    )


class TraceReader:
    """Sequential reader; frames come back in file order, validated.

    ``next_frame()`` returns ``None`` at end-of-trace. A final line that is
    cut off mid-record (no trailing newline, not valid JSON) is treated as
    end-of-trace with a warning; any other bad line raises
    :class:`InvalidTrace` naming the frame index and line number.
    """

    def __init__(self, stream: IO[str], validate: bool = True):
        self._stream = stream
        self._validate = validate
        self._line_no = 0
        self._frame_index = 0
        self._last_ts: Optional[float] = None
        self.header: Optional[dict] = None
        self.topology: Optional[Topology] = None
        self.truncated = False
        first = self._readline()
        if first is None:
            return
        try:
            header = json.loads(first)
        except json.JSONDecodeError as e:
            raise InvalidTrace(f"line 1: bad trace header: {e}") from None
        if not isinstance(header, dict) or "version" not in header:
            raise InvalidTrace("line 1: trace header lacks a version field")
        if header["version"] not in SUPPORTED_VERSIONS:
            raise TraceVersionError(
                f"trace version {header['version']!r} not supported (supported: "
                f"{', '.join(map(str, SUPPORTED_VERSIONS))})"
            )
        self.header = header
        try:
            self.topology = Topology.from_json(header["topology"])
        except (KeyError, TypeError, ValueError) as e:
            raise InvalidTrace(f"line 1: bad topology: {e}") from None

    @classmethod
    def open(cls, path, validate: bool = True) -> "TraceReader":
        return cls(open(path, "r", encoding="utf-8"), validate=validate)

    def close(self):
        self._stream.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _readline(self) -> Optional[str]:
        while True:
            line = self._stream.readline()
            if not line:
                return None
            self._line_no += 1
            if line.strip():
                return line

    def next_frame(self) -> Optional[TelemetryFrame]:
        if self.topology is None:
            return None
        line = self._readline()
        if line is None:
            return None
        idx = self._frame_index
        try:
            frame = decode_frame(_loads(line))
        except json.JSONDecodeError as e:
            if not line.endswith("\n") and self._stream.readline() == "":
                logger.warning("trace truncated in frame %d (line %d); stopping", idx, self._line_no)
                self.truncated = True
                return None
            raise InvalidTrace(f"frame {idx} (line {self._line_no}): {e}") from None
        except (KeyError, TypeError, ValueError) as e:
            raise InvalidTrace(f"frame {idx} (line {self._line_no}): malformed record: {e}") from None
        if self._validate:
            try:
                check_frame(frame, self.topology)
            except InvalidTrace as e:
                raise InvalidTrace(f"frame {idx} (line {self._line_no}): {e}") from None
        if self._last_ts is not None and frame.timestamp < self._last_ts:
            raise InvalidTrace(
                f"frame {idx} (line {self._line_no}): timestamp {frame.timestamp} precedes "
                f"{self._last_ts} (monotonicity violation)"
            )
        self._last_ts = frame.timestamp
        self._frame_index += 1
        return frame

    def __iter__(self) -> Iterator[TelemetryFrame]:
        while True:
            f = self.next_frame()
            if f is None:
                return
            yield f


def replay_next_frame(reader: TraceReader) -> Optional[TelemetryFrame]:
    return reader.next_frame()


def read_trace(path) -> tuple:
    """Load a whole trace; returns ``(topology, [frames], header)``."""
    with TraceReader.open(path) as r:
        return r.topology, list(r), r.header


class TraceWriter:
    """Writes a trace to ``path`` atomically (temp file + rename on close)."""

    def __init__(self, path, topology: Topology, **header_extra):
        self.path = Path(path)
        self._tmp = self.path.with_name(f".{self.path.name}.tmp{os.getpid()}")
        self._fh = open(self._tmp, "w", encoding="utf-8", newline="\n")
        self._fh.write(encode_header(topology, **header_extra) + "\n")
        self.frames = 0

    def write(self, frame: TelemetryFrame) -> None:
        self._fh.write(encode_frame(frame) + "\n")
        self.frames += 1

    def write_raw(self, line: str) -> None:
        self._fh.write(line + "\n")
        self.frames += 1

    def close(self) -> None:
        self._fh.close()
        os.replace(self._tmp, self.path)

    def abort(self) -> None:
        self._fh.close()
        self._tmp.unlink(missing_ok=True)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, *rest):
        if exc_type is None:
            self.close()
        else:
            self.abort()


def dumps_trace(topology: Topology, frames, **header_extra) -> str:
    buf = io.StringIO()
    buf.write(encode_header(topology, **header_extra) + "\n")
    for f in frames:
        buf.write(encode_frame(f) + "\n")
    return buf.getvalue()
