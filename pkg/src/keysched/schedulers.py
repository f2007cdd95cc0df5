"""Key schedulers and the per-frame decision loop.

Every scheduler maps a :class:`SchedulerContext` to an action (``KEY`` or
``NONKEY``). :func:`run` drives one scheduler across a window of a trace,
forcing the first frame to be a key.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from . import rng as crng
from .env import Trace, TraceBank, accumulated_motion, deviation_feature, prop_quality
from .errors import BoundsError, ConfigError, StateError
from .policy import KEY, NONKEY, PolicyParams, SchedulerState, forward_batch

DEFAULT_WINDOW = 90


@dataclass
class SchedulerContext:
    trace: Trace
    frame_index: int
    last_key: int
    history: tuple[int, ...]

    @property
    def lkd(self) -> int:
        return self.frame_index - self.last_key

    @property
    def kar(self) -> float:
        return sum(self.history) / len(self.history) if self.history else 0.0

    @cached_property
    def deviation(self) -> np.ndarray:
        return deviation_feature(self.trace, self.frame_index, self.last_key)

    def state(self, lkd_scale: float = 100.0) -> SchedulerState:
        return SchedulerState(self.deviation, self.kar, self.lkd, lkd_scale)


def decide_fixed(n: int, ctx: SchedulerContext) -> int:
    if n < 1:
        raise ConfigError("interval", f"must be >= 1, got {n}")
    return KEY if ctx.lkd >= n else NONKEY


def decide_random(p_key: float, ctx: SchedulerContext, rng: np.random.Generator) -> int:
    if not 0 < p_key <= 1:
        raise ConfigError("p_key", f"must lie in (0, 1], got {p_key}")
    return KEY if rng.random() < p_key else NONKEY


def decide_magnitude(threshold: float, ctx: SchedulerContext) -> int:
    if not threshold > 0:
        raise ConfigError("threshold", f"must be positive, got {threshold}")
    m = accumulated_motion(ctx.trace, ctx.last_key, ctx.frame_index)
    return KEY if m >= threshold else NONKEY


class DeviationRegressor:
    """Linear least-squares map from deviation features to agreement.

    Predictions are clipped to [0, 1], the range agreement itself lives in.
    """

    def __init__(self):
        self.coef = None

    @property
    def trained(self) -> bool:
        return self.coef is not None

    def fit(self, traces, max_gap: int = 60, stride: int = 1) -> "DeviationRegressor":
        """Fit on every (i, i - g) pair with key gap g in 0..max_gap."""
        if max_gap < 0 or stride < 1:
            raise ConfigError("max_gap", "max_gap must be >= 0 and stride >= 1")
        bank = TraceBank(traces)
        tids, fs, ks = [], [], []
        for tid, n in enumerate(bank.lengths):
            for g in range(min(max_gap, int(n) - 1) + 1):
                i = np.arange(g, n, stride)
                tids.append(np.full(i.size, tid))
                fs.append(i)
                ks.append(i - g)
        tids, fs, ks = np.concatenate(tids), np.concatenate(fs), np.concatenate(ks)
        X = np.column_stack([np.ones(tids.size), bank.deviation(tids, fs, ks)])
        self.coef, *_ = np.linalg.lstsq(X, bank.agreement(tids, fs, ks), rcond=None)
        return self

    def predict(self, feature: np.ndarray) -> float:
        if self.coef is None:
            raise StateError("deviation regressor has not been fitted")
        return float(np.clip(self.coef[0] + np.dot(self.coef[1:], feature), 0.0, 1.0))


def decide_deviation(threshold: float, ctx: SchedulerContext, regressor: DeviationRegressor) -> int:
    if not regressor.trained:
        raise StateError("deviation regressor has not been fitted")
    return KEY if regressor.predict(ctx.deviation) < threshold else NONKEY


def policy_key_prob(params: PolicyParams, ctx: SchedulerContext) -> float:
    X = ctx.deviation[None, :]
    E = np.array([[ctx.kar, ctx.lkd / params.arch.lkd_scale]])
    probs, _, _ = forward_batch(params, X, E)
    return float(probs[0, KEY])


def decide_policy(params: PolicyParams, tau: float, ctx: SchedulerContext) -> int:
    if not 0 < tau < 1:
        raise ConfigError("tau", f"must lie in (0, 1), got {tau}")
    return KEY if policy_key_prob(params, ctx) > tau else NONKEY


# -- scheduler objects --------------------------------------------------------

class Scheduler:
    kind = "base"
    last_p_key = float("nan")

    def reset(self, trace: Trace, start: int) -> None:
        pass

    def decide(self, ctx: SchedulerContext) -> int:
        raise NotImplementedError

    @property
    def control(self):
        return None


class FixedScheduler(Scheduler):
    kind = "fixed"

    def __init__(self, n: int):
        if int(n) != n or n < 1:
            raise ConfigError("interval", f"must be an integer >= 1, got {n}")
        self.n = int(n)

    @property
    def control(self):
        return self.n

    def decide(self, ctx):
        return decide_fixed(self.n, ctx)


class RandomScheduler(Scheduler):
    """Bernoulli keys; the stream is reseeded per (trace, start) so results
    do not depend on evaluation order."""

    kind = "random"

    def __init__(self, p_key: float, seed: int = 0):
        if not 0 < p_key <= 1:
            raise ConfigError("p_key", f"must lie in (0, 1], got {p_key}")
        self.p_key = float(p_key)
        self.seed = int(seed)
        self._rng = None

    @property
    def control(self):
        return self.p_key

    def reset(self, trace, start):
        self._rng = np.random.Generator(np.random.PCG64(crng.derive_seed(self.seed, trace.seed, start)))

    def decide(self, ctx):
        return decide_random(self.p_key, ctx, self._rng)


class MagnitudeScheduler(Scheduler):
    kind = "magnitude"

    def __init__(self, threshold: float):
        if not threshold > 0:
            raise ConfigError("threshold", f"must be positive, got {threshold}")
        self.threshold = float(threshold)

    @property
    def control(self):
        return self.threshold

    def decide(self, ctx):
        return decide_magnitude(self.threshold, ctx)


class DeviationScheduler(Scheduler):
    kind = "deviation"

    def __init__(self, threshold: float, regressor: DeviationRegressor):
        self.threshold = float(threshold)
        self.regressor = regressor

    @property
    def control(self):
        return self.threshold

    def decide(self, ctx):
        return decide_deviation(self.threshold, ctx, self.regressor)


class PolicyScheduler(Scheduler):
    kind = "policy"

    def __init__(self, params: PolicyParams, tau: float):
        if not 0 < tau < 1:
            raise ConfigError("tau", f"must lie in (0, 1), got {tau}")
        self.params = params
        self.tau = float(tau)

    @property
    def control(self):
        return self.tau

    def decide(self, ctx):
        self.last_p_key = policy_key_prob(self.params, ctx)
        return KEY if self.last_p_key > self.tau else NONKEY


# -- rollouts -----------------------------------------------------------------

@dataclass
class Rollout:
    trace_seed: int
    start: int
    actions: np.ndarray
    quality: np.ndarray
    lkd: np.ndarray
    kar: np.ndarray
    p_key: np.ndarray

    @property
    def length(self) -> int:
        return int(self.actions.size)

    @property
    def frames(self) -> np.ndarray:
        return np.arange(self.start, self.start + self.length)

    @property
    def decided(self) -> np.ndarray:
        """False for the forced initial key, True where the scheduler decided."""
        d = np.ones(self.length, dtype=bool)
        d[0] = False
        return d

    @property
    def keys(self) -> np.ndarray:
        return self.frames[self.actions == KEY]

    @property
    def mean_quality(self) -> float:
        return float(np.mean(self.quality))


def run(scheduler: Scheduler, trace: Trace, start: int = 0, length: int | None = None,
        window: int = DEFAULT_WINDOW) -> Rollout:
    """Run one scheduler over frames ``start .. start + length - 1``."""
    if length is None:
        length = trace.n_frames - start
    if start < 0 or length < 1 or start + length > trace.n_frames:
        raise BoundsError(f"window start={start} length={length} exceeds trace of {trace.n_frames} frames")
    if window < 1:
        raise ConfigError("window", f"must be >= 1, got {window}")
    scheduler.reset(trace, start)
    actions = np.zeros(length, dtype=np.int64)
    quality = np.zeros(length)
    lkd = np.zeros(length, dtype=np.int64)
    kar = np.zeros(length)
    p_key = np.full(length, np.nan)

    history = deque([KEY], maxlen=window)
    actions[0] = KEY
    quality[0] = trace.key_quality[start]
    last_key = start
    for j in range(1, length):
        i = start + j
        ctx = SchedulerContext(trace, i, last_key, tuple(history))
        lkd[j] = ctx.lkd
        kar[j] = ctx.kar
        scheduler.last_p_key = float("nan")
        a = scheduler.decide(ctx)
        p_key[j] = scheduler.last_p_key
        actions[j] = a
        if a == KEY:
            quality[j] = trace.key_quality[i]
            last_key = i
        else:
            quality[j] = prop_quality(trace, i, last_key)
        history.append(a)
    return Rollout(trace.seed, start, actions, quality, lkd, kar, p_key)


def write_rollout_csv(rollout: Rollout, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "action", "quality", "lkd", "kar", "p_key"])
        for j in range(rollout.length):
            p = rollout.p_key[j]
            w.writerow([rollout.start + j, int(rollout.actions[j]), format(rollout.quality[j], ".17g"),
                        int(rollout.lkd[j]), format(rollout.kar[j], ".17g"),
                        "" if np.isnan(p) else format(p, ".17g")])


def run_policy_lockstep(params: PolicyParams, tau: float, traces, window: int = DEFAULT_WINDOW) -> list[Rollout]:
    """Policy scheduler over whole traces, all traces advanced together.

    Produces the same decisions as calling :func:`run` per trace with a
    :class:`PolicyScheduler`; the forward pass is batched across traces.
    """
    if not 0 < tau < 1:
        raise ConfigError("tau", f"must lie in (0, 1), got {tau}")
    traces = list(traces)
    bank = TraceBank(traces)
    T = len(traces)
    lengths = bank.lengths
    L = int(lengths.max())
    actions = np.zeros((T, L), dtype=np.int64)
    quality = np.zeros((T, L))
    lkd = np.zeros((T, L), dtype=np.int64)
    kar = np.zeros((T, L))
    p_key = np.full((T, L), np.nan)
    actions[:, 0] = KEY
    quality[:, 0] = bank.kq[bank.offsets]
    last = np.zeros(T, dtype=np.int64)
    # history as a ring of the last `window` decisions
    ring = np.zeros((T, window), dtype=np.int64)
    ring[:, 0] = KEY
    count = np.ones(T, dtype=np.int64)
    ksum = np.ones(T, dtype=np.int64)
    tid_all = np.arange(T)
    for i in range(1, L):
        rows = tid_all[lengths > i]
        f = np.full(rows.size, i)
        k = last[rows]
        n_hist = np.minimum(count[rows], window)
        kr = ksum[rows] / n_hist
        X = bank.deviation(rows, f, k)
        E = np.column_stack([kr, (f - k) / params.arch.lkd_scale])
        probs, _, _ = forward_batch(params, X, E)
        pk = probs[:, KEY]
        a = (pk > tau).astype(np.int64)
        lkd[rows, i] = f - k
        kar[rows, i] = kr
        p_key[rows, i] = pk
        actions[rows, i] = a
        quality[rows, i] = np.where(a == KEY, bank.key_quality(rows, f), bank.prop_quality(rows, f, k))
        last[rows] = np.where(a == KEY, f, k)
        slot = count[rows] % window
        ksum[rows] += a - np.where(count[rows] >= window, ring[rows, slot], 0)
        ring[rows, slot] = a
        count[rows] += 1
    out = []
    for t in range(T):
        n = int(lengths[t])
        out.append(Rollout(traces[t].seed, 0, actions[t, :n].copy(), quality[t, :n].copy(), lkd[t, :n].copy(),
                           kar[t, :n].copy(), p_key[t, :n].copy()))
    return out
