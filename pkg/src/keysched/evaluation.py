"""Evaluation: metrics, simulated throughput, sweeps and the optimal schedule.

Throughput is simulated from per-frame costs rather than measured. The
oracle is an exact dynamic program over key placements with a key budget,
used as an upper bound for every scheduler.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .env import Trace
from .errors import ConfigError, KeyschedError
from .schedulers import (
    DEFAULT_WINDOW,
    Rollout,
    Scheduler,
    run,
)


@dataclass(frozen=True)
class CostModel:
    t_key: float = 1.0 / 10.1
    t_nonkey: float = 1.0 / 153.8
    t_sched: float = 0.001

    def validate(self) -> None:
        for name in ("t_key", "t_nonkey", "t_sched"):
            if not getattr(self, name) > 0:
                raise ConfigError(name, "must be positive")
        if not self.t_key > self.t_nonkey:
            raise ConfigError("t_key", "must exceed t_nonkey")

    def fps(self, n_keys: int, n_frames: int) -> float:
        total = n_keys * self.t_key + (n_frames - n_keys) * self.t_nonkey + n_frames * self.t_sched
        return n_frames / total


@dataclass
class EvalMetrics:
    mean_quality: float
    aki: float
    cki: list[int]
    sim_fps: float
    n_keys: int
    n_frames: int
    first_key_offsets: list[int] = field(default_factory=list)
    trailing_gaps: list[int] = field(default_factory=list)
    window_lengths: list[int] = field(default_factory=list)

    def accounting_holds(self) -> bool:
        """sum(cki) + first-key offset + trailing gap == frames - 1, summed over windows."""
        lhs = sum(self.cki) + sum(self.first_key_offsets) + sum(self.trailing_gaps)
        return lhs == sum(n - 1 for n in self.window_lengths)


def metrics_from_rollouts(rollouts: Sequence[Rollout], cost: CostModel = CostModel()) -> EvalMetrics:
    if not rollouts:
        raise ValueError("need at least one rollout")
    n_frames = sum(r.length for r in rollouts)
    n_keys = 0
    cki, firsts, trails = [], [], []
    qsum = 0.0
    for r in rollouts:
        pos = np.flatnonzero(r.actions == 1)
        n_keys += pos.size
        cki.extend(int(g) for g in np.diff(pos))
        firsts.append(int(pos[0]))
        trails.append(int(r.length - 1 - pos[-1]))
        qsum += float(np.sum(r.quality))
    return EvalMetrics(mean_quality=qsum / n_frames, aki=n_frames / n_keys, cki=cki,
                       sim_fps=cost.fps(n_keys, n_frames), n_keys=n_keys, n_frames=n_frames,
                       first_key_offsets=firsts, trailing_gaps=trails,
                       window_lengths=[r.length for r in rollouts])


def run_all(scheduler: Scheduler, traces: Sequence[Trace], window: int = DEFAULT_WINDOW,
            jobs: int = 1) -> list[Rollout]:
    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        import copy

        def one(t):
            return run(copy.deepcopy(scheduler), t, window=window)
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, traces))
    return [run(scheduler, t, window=window) for t in traces]


def evaluate(scheduler: Scheduler, traces: Sequence[Trace], cost: CostModel = CostModel(),
             window: int = DEFAULT_WINDOW, jobs: int = 1) -> EvalMetrics:
    traces = list(traces)
    if not traces:
        raise ValueError("evaluate needs at least one trace")
    cost.validate()
    return metrics_from_rollouts(run_all(scheduler, traces, window, jobs), cost)


# -- oracle -------------------------------------------------------------------

def prop_matrix(trace: Trace, start: int, length: int) -> np.ndarray:
    """P[a, b] = quality of window frame b propagated from window key a (b >= a), else 0."""
    idx = np.arange(start, start + length)
    m = trace._cum[idx][None, :] - trace._cum[idx][:, None]
    q = np.maximum(trace.quality_floor,
                   trace.key_quality[idx][None, :] - trace.alpha * m - trace.beta * (m * m))
    return np.triu(q)


def schedule_quality(trace: Trace, start: int, length: int, keys: Iterable[int]) -> float:
    """Mean quality of a window under a given key set (frame indices, must include start)."""
    keys = sorted(set(int(k) for k in keys))
    if not keys or keys[0] != start:
        raise ValueError("key set must contain the window start")
    P = prop_matrix(trace, start, length)
    last = np.zeros(length, dtype=np.int64)
    for k in keys:
        last[k - start:] = k - start
    return math.fsum(P[last, np.arange(length)]) / length


def _two_sum(a, b):
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


def _dd_add(h1, l1, h2, l2):
    """Double-double addition; returns the pair (round(x), x - round(x))."""
    s, e = _two_sum(h1, h2)
    e = e + (l1 + l2)
    hi = s + e
    return hi, e - (hi - s)


def oracle_schedule(trace: Trace, start: int, length: int, key_budget: int):
    """Best key placement with at most ``key_budget`` keys, frame ``start`` included.

    Returns ``(keys, mean_quality)``. Ties go to the lexicographically smallest
    key set. Runs in O(length**2 * budget).

    Partial sums are carried as double-double pairs, so comparisons between
    placements are exact rather than subject to summation-order rounding
    (this holds whenever every quality value exceeds about 2**-40).
    """
    if length < 1 or start < 0 or start + length > trace.n_frames:
        raise ValueError(f"window start={start} length={length} does not fit the trace")
    if not 1 <= key_budget <= length:
        raise ValueError(f"key_budget must lie in [1, {length}], got {key_budget}")
    L = length
    P = prop_matrix(trace, start, length)
    # seg[a, b] = quality of frames a..b-1 all served by key a (P is zero left of a)
    seg_hi = np.zeros((L, L + 1))
    seg_lo = np.zeros((L, L + 1))
    for c in range(L):
        seg_hi[:, c + 1], seg_lo[:, c + 1] = _dd_add(seg_hi[:, c], seg_lo[:, c], P[:, c], 0.0)
    tail_hi, tail_lo = seg_hi[:, L].copy(), seg_lo[:, L].copy()
    # next key j must come after a
    blocked = np.tril(np.ones((L, L), dtype=bool))
    V_hi, V_lo = tail_hi, tail_lo
    choice = np.full((key_budget + 1, L), -1, dtype=np.int64)
    for b in range(2, key_budget + 1):
        c_hi, c_lo = _dd_add(seg_hi[:, :L], seg_lo[:, :L], V_hi[None, :], V_lo[None, :])
        c_hi[blocked] = -np.inf
        m_hi = c_hi.max(axis=1)
        top = c_hi == m_hi[:, None]
        m_lo = np.where(top, c_lo, -np.inf).max(axis=1)
        j = np.argmax(top & (c_lo == m_lo[:, None]), axis=1)
        better = (m_hi > tail_hi) | ((m_hi == tail_hi) & (m_lo > tail_lo))
        choice[b] = np.where(better, j, -1)
        V_hi = np.where(better, m_hi, tail_hi)
        V_lo = np.where(better, m_lo, tail_lo)
    keys = [0]
    a, b = 0, key_budget
    while b >= 2 and choice[b, a] >= 0:
        a = int(choice[b, a])
        keys.append(a)
        b -= 1
    keys = [start + k for k in keys]
    return keys, schedule_quality(trace, start, length, keys)


# -- sweeps and histograms -----------------------------------------------------

@dataclass
class CurveRow:
    scheduler: str
    control: object
    aki: float
    mean_quality: float
    sim_fps: float
    n_keys: int
    n_frames: int


CURVE_COLUMNS = ("scheduler", "control", "aki", "mean_quality", "sim_fps", "n_keys", "n_frames")


def sweep(factories: Sequence[tuple[str, object, Callable[[], Scheduler]]], traces: Sequence[Trace],
          cost: CostModel = CostModel(), window: int = DEFAULT_WINDOW, jobs: int = 1):
    """Evaluate each (label, control, factory) operating point.

    Returns ``(rows sorted by aki, warnings)``; an invalid control produces a
    warning entry instead of a row.
    """
    rows, warnings = [], []
    for label, control, make in factories:
        try:
            sched = make()
            m = evaluate(sched, traces, cost, window, jobs)
        except KeyschedError as exc:
            warnings.append(f"{label}={control}: skipped ({exc})")
            continue
        rows.append(CurveRow(label, control, m.aki, m.mean_quality, m.sim_fps, m.n_keys, m.n_frames))
    rows.sort(key=lambda r: (r.aki, r.scheduler, str(r.control)))
    return rows, warnings


def _cell(v) -> str:
    # repr of a float is its shortest exact round-trip form
    return repr(v) if isinstance(v, float) else str(v)


def write_curve_csv(rows: Sequence[CurveRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for r in rows:
            w.writerow([_cell(getattr(r, c)) for c in CURVE_COLUMNS])


def read_curve_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class Histogram:
    bin_lo: list[int]
    bin_hi: list[int]
    counts: list[int]
    variance: float
    max_gap: int
    mean_gap: float


def cki_histogram(rollouts_or_gaps, bin_width: int = 1) -> Histogram:
    """Bin consecutive-key gaps into [lo, lo + bin_width) buckets."""
    if bin_width < 1:
        raise ValueError("bin_width must be >= 1")
    gaps = []
    for r in rollouts_or_gaps:
        if isinstance(r, Rollout):
            gaps.extend(int(g) for g in np.diff(np.flatnonzero(r.actions == 1)))
        else:
            gaps.append(int(r))
    if not gaps:
        return Histogram([], [], [], 0.0, 0, float("nan"))
    g = np.asarray(gaps)
    lo = (g // bin_width) * bin_width
    uniq, counts = np.unique(lo, return_counts=True)
    return Histogram([int(u) for u in uniq], [int(u) + bin_width for u in uniq], [int(c) for c in counts],
                     float(np.var(g)), int(g.max()), float(g.mean()))


def write_histogram_csv(h: Histogram, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count"])
        for row in zip(h.bin_lo, h.bin_hi, h.counts):
            w.writerow(row)
