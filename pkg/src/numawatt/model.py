"""Attribution mathematics for CPU and DRAM energy on NUMA hosts.

Everything here is a pure function over plain numbers and sequences.
Per-socket quantities are passed as sequences indexed by socket id.
The functions are called once per frame by the engine, so they stay in
plain Python; numpy would cost more than it saves on 2-8 element vectors.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence

logger = logging.getLogger(__name__)

RAPL_MIN_PERIOD = 0.001
DEFAULT_SAMPLE_PERIOD = 0.01


class StaticMode(str, Enum):
    FULL = "full"
    APPORTIONED = "apportioned"
    EXCLUDED = "excluded"


class MemDenominator(str, Enum):
    USED = "used"
    TOTAL = "total"


@dataclass(frozen=True)
class ModelParams:
    gamma: float = 1.0
    sigma: float = 1.0
    sample_period: float = DEFAULT_SAMPLE_PERIOD
    static_period: float = 60.0
    # host-wide memory figure the DRAM credit divides by
    mem_denominator: MemDenominator = MemDenominator.USED

    def __post_init__(self):
        for name in ("gamma", "sigma"):
            v = getattr(self, name)
            if not (0.0 < v <= 1.0):
                raise ValueError(f"{name} must be in (0, 1], got {v}")
        if self.sample_period < RAPL_MIN_PERIOD:
            raise ValueError(
                f"sample_period {self.sample_period} s is below the 1 ms RAPL update interval"
            )
        if self.static_period <= 0:
            raise ValueError("static_period must be positive")
        object.__setattr__(self, "mem_denominator", MemDenominator(self.mem_denominator))


@dataclass
class Diagnostics:
    """Counters for the soft failures the model tolerates."""

    delta_clamps: int = 0
    ratio_clamps: int = 0
    zero_mem_total: int = 0
    skipped_tasks: int = 0
    skipped_intervals: int = 0
    messages: list = field(default_factory=list)

    def warn(self, kind: str, msg: str) -> None:
        setattr(self, kind, getattr(self, kind) + 1)
        if len(self.messages) < 32:
            self.messages.append(msg)
        logger.debug(msg)

    def merge(self, other: "Diagnostics") -> None:
        self.delta_clamps += other.delta_clamps
        self.ratio_clamps += other.ratio_clamps
        self.zero_mem_total += other.zero_mem_total
        self.skipped_tasks += other.skipped_tasks
        self.skipped_intervals += other.skipped_intervals
        self.messages.extend(other.messages[: max(0, 32 - len(self.messages))])

    def as_list(self) -> list:
        out = []
        for kind in ("delta_clamps", "ratio_clamps", "zero_mem_total", "skipped_tasks",
                     "skipped_intervals"):
            n = getattr(self, kind)
            if n:
                out.append(f"{kind}={n}")
        return out


def _check_finite_nonneg(name, value):
    if not math.isfinite(value) or value < 0:
        raise ValueError(f"{name} must be finite and >= 0, got {value}")


# --- static / dynamic split -------------------------------------------------

def static_power(calibration_energy: float, t_static: float) -> float:
    """Average static power in watts from energy sampled over ``t_static``."""
    if not t_static > 0:
        raise ValueError(f"t_static must be positive, got {t_static}")
    _check_finite_nonneg("calibration_energy", calibration_energy)
    return calibration_energy / t_static


def static_energy(p_static: float, t_sample: float) -> float:
    if not t_sample > 0:
        raise ValueError(f"t_sample must be positive, got {t_sample}")
    _check_finite_nonneg("p_static", p_static)
    return p_static * t_sample


def dynamic_delta(e_total: float, e_static: float, diag: Optional[Diagnostics] = None) -> float:
    """Measured energy above the static estimate, clamped at zero."""
    d = e_total - e_static
    if d < 0:
        if diag is not None:
            diag.warn("delta_clamps", f"static {e_static:.6g} J exceeds total {e_total:.6g} J")
        return 0.0
    return d


# --- residence rates --------------------------------------------------------

def cpu_residence(placements: Iterable, n_sockets: int) -> list:
    """Fraction of observed placements that landed on each socket.

    ``placements`` yields ``(timestamp, socket)`` pairs, or bare socket ids;
    a socket of ``None`` marks an observation where the task was not
    scheduled and is left out of the denominator.
    """
    counts = [0] * n_sockets
    seen = 0
    for obs in placements:
        s = obs[1] if isinstance(obs, tuple) else obs
        if s is None:
            continue
        counts[s] += 1
        seen += 1
    if not seen:
        return [0.0] * n_sockets
    return [c / seen for c in counts]


def mem_residence(mem_samples: Iterable[Sequence[int]], n_sockets: int) -> list:
    """Mean per-node fraction of a process's own private memory.

    Samples whose total is zero carry no placement information and are skipped.
    """
    acc = [0.0] * n_sockets
    used = 0
    for sample in mem_samples:
        total = sum(sample)
        if total <= 0:
            continue
        for s in range(n_sockets):
            acc[s] += sample[s] / total
        used += 1
    if not used:
        return [0.0] * n_sockets
    return [a / used for a in acc]


# --- expected usage per socket ----------------------------------------------

def expected_cpu_time(tasks: Iterable, n_sockets: int) -> list:
    """Per-socket CPU seconds of an application: sum of rate * task CPU time."""
    out = [0.0] * n_sockets
    for rates, cpu_time in tasks:
        if cpu_time < 0:
            raise ValueError(f"negative CPU time {cpu_time}")
        for s in range(n_sockets):
            out[s] += rates[s] * cpu_time
    return out


def expected_mem(tasks: Iterable, n_sockets: int) -> list:
    """Per-node private bytes of an application (processes only, not threads)."""
    out = [0.0] * n_sockets
    for rates, mem in tasks:
        if mem < 0:
            raise ValueError(f"negative memory {mem}")
        for s in range(n_sockets):
            out[s] += rates[s] * mem
    return out


# --- credits ----------------------------------------------------------------

def _credit(num, den, exponent, diag, what):
    if num < 0:
        raise ValueError(f"negative {what} usage {num}")
    ratio = num / den
    if ratio > 1.0:
        # numerator and denominator come from counters read at different instants
        if ratio > 1.0 + 1e-12 and diag is not None:
            diag.warn("ratio_clamps", f"{what} share {ratio:.6g} > 1 clamped")
        ratio = 1.0
    if exponent == 1.0:
        return ratio
    return ratio ** exponent


def cpu_credit(t_app: float, t_total: float, gamma: float = 1.0,
               diag: Optional[Diagnostics] = None) -> float:
    if not (0.0 < gamma <= 1.0):
        raise ValueError(f"gamma must be in (0, 1], got {gamma}")
    if t_total <= 0:
        return 0.0
    return _credit(t_app, t_total, gamma, diag, "cpu")


def mem_credit(m_app: float, m_total: float, sigma: float = 1.0,
               diag: Optional[Diagnostics] = None) -> float:
    if not (0.0 < sigma <= 1.0):
        raise ValueError(f"sigma must be in (0, 1], got {sigma}")
    if m_total <= 0:
        if diag is not None:
            diag.warn("zero_mem_total", "host memory denominator is zero")
        return 0.0
    return _credit(m_app, m_total, sigma, diag, "dram")


# --- aggregation ------------------------------------------------------------

def attribute_cpu(per_socket: Iterable) -> float:
    """Sum over sockets of ``delta * credit + static_part``.

    The caller decides what goes into ``static_part`` (see :class:`StaticMode`).
    """
    return math.fsum(d * c + st for d, c, st in per_socket)


attribute_dram = attribute_cpu


def static_share(e_static: float, raw_share: float, mode: StaticMode) -> float:
    """Static energy charged to one application on one socket."""
    mode = StaticMode(mode)
    if mode is StaticMode.FULL:
        return e_static
    if mode is StaticMode.APPORTIONED:
        return e_static * min(max(raw_share, 0.0), 1.0)
    return 0.0


def coarse_attribute(e_total: float, u_app: float, u_total: float) -> float:
    """Host energy scaled by the application's share of summed usage, no NUMA weighting."""
    if not u_total > 0:
        raise ValueError("u_total must be positive")
    if u_app > u_total:
        raise ValueError(f"u_app {u_app} exceeds u_total {u_total}")
    return e_total * u_app / u_total
