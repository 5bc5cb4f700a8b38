"""Run database, record export, calibration files and exponent fitting.

Layout of a database directory::

    <db>/runs/<run_id>/manifest.json
    <db>/runs/<run_id>/records.jsonl

Runs are never modified once finished; new runs get the next sequence
number. Run ids are derived from the sequence number, mode and a digest of
the configuration and input, so the same replay into two fresh databases
produces identical record files.
"""

from __future__ import annotations

import csv
import fcntl
import hashlib
import io
import json
import logging
import math
import os
import platform
import statistics
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence

from . import __version__
from .engine import SELF_APP, IntervalResult
from .errors import CalibrationMismatch, NumawattError
from .model import static_power
from .telemetry.counters import rapl_deltas
from .telemetry.frames import Topology

logger = logging.getLogger(__name__)

RECORD_SCHEMA_VERSION = 1
RECORD_FIELDS = ("run_id", "t0", "t1", "app", "socket", "device", "delta_j", "credit",
                 "static_j", "total_j", "self_j", "coarse_j", "warnings")
GROUP_BY = ("record", "app", "socket", "interval")
SUM_FIELDS = ("cpu_total_j", "cpu_dynamic_j", "cpu_static_j", "cpu_coarse_j",
              "dram_total_j", "dram_dynamic_j", "dram_static_j", "dram_coarse_j")
MODES = ("live", "replay", "simulate")


class EmptyDatabase(NumawattError):
    pass


def _num(x: float) -> str:
    if not math.isfinite(x):
        raise ValueError(f"non-finite value {x} in record")
    return repr(float(x))


_ROW = ('%s%d,"device":"%s","delta_j":%r,"credit":%r,"static_j":%r,"total_j":%r,'
        '"self_j":%r,"coarse_j":%r,"warnings":%s}')


@lru_cache(maxsize=4096)
def _jstr(s: str) -> str:
    return json.dumps(s)


def record_lines(run_id: str, result: IntervalResult) -> List[str]:
    """JSONL lines for one interval; formatted by hand, this is the hot path of a long replay."""
    rid = _jstr(run_id)
    out = []
    for rec in result.records:
        app = _jstr(rec.app)
        warn = json.dumps(rec.diagnostics) if rec.diagnostics else "[]"
        head = f'{{"run_id":{rid},"t0":{_num(rec.t0)},"t1":{_num(rec.t1)},"app":{app},"socket":'
        for sa in rec.per_socket:
            for device, d in (("cpu", sa.cpu), ("dram", sa.dram)):
                vals = (d.delta, d.credit, d.static, d.delta * d.credit + d.static, d.self_j, d.coarse)
                if not math.isfinite(sum(vals)):
                    raise ValueError(f"non-finite value in record for {rec.app} at t0={rec.t0}")
                out.append(_ROW % ((head, sa.socket, device) + vals + (warn,)))
    return out


def parse_record(line: str) -> dict:
    """One record row; fields this version does not know are dropped."""
    obj = json.loads(line)
    missing = [f for f in RECORD_FIELDS if f not in obj]
    if missing:
        raise ValueError(f"record is missing {', '.join(missing)}")
    return {f: obj[f] for f in RECORD_FIELDS}


# --- database ---------------------------------------------------------------------

@contextmanager
def _locked(path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    os.replace(tmp, path)


def file_digest(path, chunk: int = 1 << 20) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        while True:
            b = f.read(chunk)
            if not b:
                break
            h.update(b)
    return h.hexdigest()


@dataclass
class RunManifest:
    run_id: str
    mode: str
    config: dict
    topology: dict
    source: dict = field(default_factory=dict)
    start: float = 0.0
    end: Optional[float] = None
    status: str = "running"
    records: int = 0
    versions: dict = field(default_factory=dict)
    record_schema: int = RECORD_SCHEMA_VERSION


class RunWriter:
    """Appends records for one run; holds the run's lock until closed."""

    def __init__(self, run_dir: Path, manifest: RunManifest):
        self.dir = run_dir
        self.manifest = manifest
        self._lock = open(run_dir / ".lock", "a")
        fcntl.flock(self._lock, fcntl.LOCK_EX)
        self._write_manifest()
        self._fh = open(run_dir / "records.jsonl", "w", encoding="utf-8", newline="\n")
        self._buf: List[str] = []

    @property
    def run_id(self) -> str:
        return self.manifest.run_id

    def _write_manifest(self) -> None:
        _atomic_write(self.dir / "manifest.json", json.dumps(asdict(self.manifest), indent=2) + "\n")

    def write(self, result: IntervalResult) -> None:
        lines = record_lines(self.manifest.run_id, result)
        self._buf.extend(lines)
        self.manifest.records += len(lines)
        if len(self._buf) >= 4096:
            self.flush()

    def flush(self) -> None:
        if self._buf:
            self._fh.write("\n".join(self._buf) + "\n")
            self._buf.clear()

    def close(self, status: str = "complete") -> None:
        self.flush()
        self._fh.close()
        self.manifest.status = status
        self.manifest.end = time.time()
        self._write_manifest()
        fcntl.flock(self._lock, fcntl.LOCK_UN)
        self._lock.close()


class Database:
    def __init__(self, path):
        self.path = Path(path)
        self.runs_dir = self.path / "runs"

    def run_ids(self) -> List[str]:
        if not self.runs_dir.is_dir():
            return []
        return sorted(p.name for p in self.runs_dir.iterdir()
                      if p.is_dir() and (p / "manifest.json").exists())

    def create_run(self, mode: str, config: dict, topology: Topology, source: dict) -> RunWriter:
        if mode not in MODES:
            raise ValueError(f"unknown run mode {mode!r}")
        blob = json.dumps({"config": config, "source": source}, sort_keys=True).encode()
        digest = hashlib.sha256(blob).hexdigest()[:10]
        with _locked(self.path / ".lock"):
            existing = [p for p in self.runs_dir.iterdir() if p.is_dir()] if self.runs_dir.is_dir() else []
            seq = len(existing) + 1
            run_id = f"{seq:04d}-{mode}-{digest}"
            run_dir = self.runs_dir / run_id
            run_dir.mkdir(parents=True)
        manifest = RunManifest(
            run_id, mode, config, topology.to_json(), source, start=time.time(),
            versions={"numawatt": __version__, "python": platform.python_version()},
        )
        return RunWriter(run_dir, manifest)

    def manifest(self, run_id: str) -> dict:
        with open(self.runs_dir / run_id / "manifest.json", "r", encoding="utf-8") as f:
            return json.load(f)

    def records_path(self, run_id: str) -> Path:
        return self.runs_dir / run_id / "records.jsonl"

    def iter_records(self, run_id: str) -> Iterator[dict]:
        with open(self.records_path(run_id), "r", encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    yield parse_record(line)

    def latest(self) -> str:
        ids = self.run_ids()
        if not ids:
            raise EmptyDatabase(f"no runs in database {self.path}")
        return ids[-1]


# --- report -----------------------------------------------------------------------

def _group_key(row: dict, group_by: str):
    if group_by == "app":
        return (row["app"],)
    if group_by == "socket":
        return (row["app"], row["socket"])
    return (row["app"], row["t0"], row["t1"])


def _key_columns(group_by: str):
    return {"app": ("app",), "socket": ("app", "socket"), "interval": ("app", "t0", "t1")}[group_by]


def aggregate(rows: Iterable[dict], group_by: str) -> List[dict]:
    """One totals row per group, plus the engine's own energy as its own application.

    Self energy appears on every application's rows for the same socket and
    interval, so it is counted once per (interval, socket, device).
    """
    acc: Dict[tuple, Dict[str, list]] = {}
    order: List[tuple] = []
    self_seen = {}
    run_id = None
    for row in rows:
        run_id = row["run_id"]
        key = _group_key(row, group_by)
        slot = acc.get(key)
        if slot is None:
            slot = acc[key] = {f: [] for f in SUM_FIELDS}
            order.append(key)
        dev = row["device"]
        dyn = row["delta_j"] * row["credit"]
        slot[f"{dev}_total_j"].append(row["total_j"])
        slot[f"{dev}_dynamic_j"].append(dyn)
        slot[f"{dev}_static_j"].append(row["static_j"])
        slot[f"{dev}_coarse_j"].append(row["coarse_j"])
        self_seen[(row["t0"], row["t1"], row["socket"], dev)] = row["self_j"]
    cols = _key_columns(group_by)
    out = []
    for key in order:
        r = {"run_id": run_id}
        r.update(zip(cols, key))
        for f in SUM_FIELDS:
            r[f] = math.fsum(acc[key][f])
        out.append(r)
    # engine self row(s)
    self_acc: Dict[tuple, Dict[str, list]] = {}
    self_order = []
    for (t0, t1, socket, dev), v in self_seen.items():
        fake = {"app": SELF_APP, "socket": socket, "t0": t0, "t1": t1}
        key = _group_key(fake, group_by)
        slot = self_acc.get(key)
        if slot is None:
            slot = self_acc[key] = {f: [] for f in SUM_FIELDS}
            self_order.append(key)
        slot[f"{dev}_total_j"].append(v)
    for key in self_order:
        r = {"run_id": run_id}
        r.update(zip(cols, key))
        for f in SUM_FIELDS:
            r[f] = math.fsum(self_acc[key][f])
        out.append(r)
    return out


def report_rows(db: Database, group_by: str = "record", run_id: Optional[str] = None) -> List[dict]:
    if group_by not in GROUP_BY:
        raise ValueError(f"group-by must be one of {', '.join(GROUP_BY)}")
    run_id = run_id or db.latest()
    rows = db.iter_records(run_id)
    if group_by == "record":
        return list(rows)
    return aggregate(rows, group_by)


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        return ";".join(v)
    return v


def write_report(rows: Sequence[dict], fmt: str, out) -> None:
    """Write rows as csv or jsonl to a text stream; floats keep full precision in both."""
    if fmt not in ("csv", "jsonl"):
        raise ValueError("format must be csv or jsonl")
    if not rows:
        return
    columns = list(rows[0].keys())
    if fmt == "jsonl":
        for r in rows:
            out.write(json.dumps(r, separators=(",", ":")) + "\n")
        return
    w = csv.writer(out, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r[c]) for c in columns])


def read_report(text: str, fmt: str) -> List[dict]:
    """Inverse of :func:`write_report`."""
    if fmt == "jsonl":
        return [json.loads(l) for l in text.splitlines() if l.strip()]
    out = []
    for r in csv.DictReader(io.StringIO(text)):
        row = {}
        for k, v in r.items():
            if k in ("run_id", "app", "device"):
                row[k] = v
            elif k == "warnings":
                row[k] = [w for w in v.split(";") if w]
            elif k == "socket":
                row[k] = int(v)
            else:
                row[k] = float(v)
        out.append(row)
    return out


# --- calibration ------------------------------------------------------------------

DISPERSION_WARN = 0.10


@dataclass
class CalibrationResult:
    static_power: List[List[float]]  # per socket [package W, dram W]
    t_static: float
    samples: int
    dispersion: List[List[float]]  # per socket stddev of per-interval power, W
    fingerprint: str

    def check_fingerprint(self, fingerprint: str, force: bool = False) -> None:
        if self.fingerprint != fingerprint:
            msg = (f"calibration was taken on host {self.fingerprint!r}, this host is "
                   f"{fingerprint!r}")
            if not force:
                raise CalibrationMismatch(msg + "; pass --force to use it anyway")
            logger.warning(msg)

    def save(self, path) -> None:
        _atomic_write(Path(path), json.dumps(asdict(self), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "CalibrationResult":
        with open(path, "r", encoding="utf-8") as f:
            obj = json.load(f)
        res = cls(**{k: obj[k] for k in ("static_power", "t_static", "samples", "dispersion",
                                         "fingerprint")})
        for p in res.static_power:
            if len(p) != 2 or min(p) < 0:
                raise ValueError(f"bad static power entry {p} in {path}")
        return res


def host_fingerprint(topology: Topology, cpu_model: str) -> str:
    return f"{topology.socket_count}x{cpu_model}"


def calibrate_from_frames(frames: Iterable, topology: Topology, fingerprint: str) -> CalibrationResult:
    """Static power per socket and domain as total energy over total time.

    Frames should come from a quiesced host. The per-interval powers give
    the dispersion; a ratio above 10% of the mean is logged as a warning.
    """
    n = topology.socket_count
    prev = None
    energy = [[[], []] for _ in range(n)]
    powers = [[[], []] for _ in range(n)]
    t_first = t_last = None
    for f in frames:
        if prev is None:
            prev, t_first = f, f.timestamp
            continue
        dt = f.timestamp - prev.timestamp
        if dt <= 0:
            prev = f
            continue
        pkg, dram = rapl_deltas(prev, f, n)
        for s in range(n):
            for d, e in enumerate((pkg[s], dram[s])):
                energy[s][d].append(e)
                powers[s][d].append(e / dt)
        prev, t_last = f, f.timestamp
    samples = len(powers[0][0]) if n else 0
    if samples < 2:
        raise ValueError(f"calibration needs at least 2 sample intervals, got {samples}")
    t_static = t_last - t_first
    static = [[static_power(math.fsum(energy[s][d]), t_static) for d in (0, 1)] for s in range(n)]
    disp = [[statistics.pstdev(powers[s][d]) for d in (0, 1)] for s in range(n)]
    for s in range(n):
        for d, name in enumerate(("package", "dram")):
            mean = static[s][d]
            if mean > 0 and disp[s][d] / mean > DISPERSION_WARN:
                logger.warning("socket %d %s power varies by %.1f%% of its mean; is the host quiet?",
                               s, name, 100 * disp[s][d] / mean)
    return CalibrationResult(static, t_static, samples, disp, fingerprint)


# --- exponent fitting ---------------------------------------------------------------

@dataclass
class FitResult:
    p_static: float
    p_dynamic: float
    exponent: float
    rmse: float
    points: int


def read_sweep(path) -> tuple:
    """``utilization,power`` CSV; a header row is optional."""
    us, ps = [], []
    with open(path, "r", encoding="utf-8", newline="") as f:
        for i, row in enumerate(csv.reader(f)):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                u, p = float(row[0]), float(row[1])
            except (ValueError, IndexError):
                if i == 0:
                    continue
                raise ValueError(f"{path}: line {i + 1} is not 'utilization,power'") from None
            us.append(u)
            ps.append(p)
    return us, ps


def fit_exponent(utilization: Sequence[float], power: Sequence[float]) -> FitResult:
    """Least-squares fit of ``P = P_s + P_d * u**g`` with ``g`` in (0, 1]."""
    import numpy as np
    from scipy.optimize import curve_fit

    u = np.asarray(utilization, dtype=float)
    p = np.asarray(power, dtype=float)
    if len(u) < 3:
        raise ValueError("need at least 3 sweep points to fit 3 parameters")
    if u.min() < 0 or u.max() > 1:
        raise ValueError("utilization must be in [0, 1]")

    def f(x, ps, pd, g):
        return ps + pd * np.power(x, g)

    p0 = (float(p.min()), float(max(p.max() - p.min(), 1e-6)), 0.8)
    (ps, pd, g), _ = curve_fit(f, u, p, p0=p0, bounds=([0, 0, 1e-3], [np.inf, np.inf, 1.0]))
    rmse = float(np.sqrt(np.mean((f(u, ps, pd, g) - p) ** 2)))
    return FitResult(float(ps), float(pd), float(g), rmse, len(u))
