"""Benchmark suites and matched-AKI comparisons between schedulers."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import rng as crng
from .env import SynthConfig, Trace, gen_trace
from .evaluation import CostModel, EvalMetrics, metrics_from_rollouts, oracle_schedule, run_all
from .policy import PolicyParams
from .schedulers import DEFAULT_WINDOW, FixedScheduler, RandomScheduler, run_policy_lockstep

TRAIN_SUITE = 1
TEST_SUITE = 2


def make_suite(n_traces: int, suite: int, cfg: SynthConfig = SynthConfig(), base_seed: int = 0) -> list[Trace]:
    """Deterministic list of synthetic traces; different ``suite`` ids never share seeds."""
    return [gen_trace(cfg, crng.derive_seed(base_seed, suite, j)) for j in range(n_traces)]


def benchmark_config(**overrides) -> SynthConfig:
    return replace(SynthConfig(n_frames=600, scene_change_rate=1.0), **overrides)


def _logit(p):
    return math.log(p / (1.0 - p))


def _sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


def calibrate_tau(params: PolicyParams, traces, target_aki: float, window: int = DEFAULT_WINDOW,
                  iters: int = 30, lo: float = 1e-6, hi: float = 1 - 1e-6):
    """Bisect tau (in logit space) so the policy's AKI lands near ``target_aki``.

    Returns ``(tau, rollouts, metrics)`` for the closest operating point seen.
    """
    best = None
    zlo, zhi = _logit(lo), _logit(hi)
    for _ in range(iters):
        z = 0.5 * (zlo + zhi)
        tau = _sigmoid(z)
        rolls = run_policy_lockstep(params, tau, traces, window)
        m = metrics_from_rollouts(rolls)
        err = abs(math.log(m.aki / target_aki))
        if best is None or err < best[0]:
            best = (err, tau, rolls, m)
        if m.aki < target_aki:
            zlo = z
        else:
            zhi = z
        if err < 0.01:
            break
    return best[1], best[2], best[3]


def scene_affinity(rollouts, traces, horizon: int = 3) -> float:
    """Fraction of scheduler-chosen keys landing 0..horizon frames after a scene change."""
    hits = total = 0
    for r, t in zip(rollouts, traces):
        near = np.zeros(t.n_frames, dtype=bool)
        for s in t.scene_changes:
            near[s:s + horizon + 1] = True
        keys = r.keys[1:]  # the forced first key is not a choice
        total += keys.size
        hits += int(np.sum(near[keys]))
    return hits / total if total else 0.0


def oracle_quality(traces, rollouts) -> float:
    """Mean oracle quality with each trace's budget set to the rollout's key count."""
    total = frames = 0.0
    for t, r in zip(traces, rollouts):
        budget = int(np.sum(r.actions == 1))
        _, q = oracle_schedule(t, r.start, r.length, budget)
        total += q * r.length
        frames += r.length
    return total / frames


@dataclass
class MatchedComparison:
    tau: float
    policy: EvalMetrics
    fixed_interval: int
    fixed: EvalMetrics
    random_p: float
    random: EvalMetrics
    oracle_quality: float
    policy_affinity: float
    random_affinity: float
    policy_rollouts: list
    fixed_rollouts: list
    random_rollouts: list

    @property
    def gap_closed(self) -> float:
        denom = self.oracle_quality - self.fixed.mean_quality
        return (self.policy.mean_quality - self.fixed.mean_quality) / denom if denom > 0 else float("nan")

    @property
    def fixed_aki_matched(self) -> bool:
        return abs(self.fixed.aki / self.policy.aki - 1.0) <= 0.10


def compare_at_matched_aki(params: PolicyParams, traces, target_aki: float = 25.0, random_seed: int = 0,
                           window: int = DEFAULT_WINDOW, cost: CostModel = CostModel()) -> MatchedComparison:
    tau, prolls, pm = calibrate_tau(params, traces, target_aki, window)
    n = max(1, int(round(pm.aki)))
    frolls = run_all(FixedScheduler(n), traces, window)
    fm = metrics_from_rollouts(frolls, cost)
    # random baseline drawn at the policy's realised key rate
    p = min(1.0, pm.n_keys / pm.n_frames)
    rrolls = run_all(RandomScheduler(p, random_seed), traces, window)
    rm = metrics_from_rollouts(rrolls, cost)
    return MatchedComparison(
        tau=tau, policy=metrics_from_rollouts(prolls, cost), fixed_interval=n, fixed=fm, random_p=p, random=rm,
        oracle_quality=oracle_quality(traces, prolls),
        policy_affinity=scene_affinity(prolls, traces), random_affinity=scene_affinity(rrolls, traces),
        policy_rollouts=prolls, fixed_rollouts=frolls, random_rollouts=rrolls)
