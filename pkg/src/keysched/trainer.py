"""REINFORCE training under a key-frequency constraint.

An episode covers frames ``t .. t+M``. Frame ``t`` is a forced key; at each
later step the rollout first checks the episode's key-all ratio
``KAR = keys / M`` and stops as soon as it exceeds ``eta``. Otherwise the
policy acts (with the epsilon clamp on over-confident posteriors) and
collects a reward only when it picks a key.

Rollouts for all ``B * K`` trials of a minibatch run in lockstep on one
frozen parameter snapshot; the gradient is accumulated in a fixed order,
so training is deterministic in (traces, config).
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import rng as crng
from .env import Trace, TraceBank, agreement, prop_quality
from .errors import BoundsError, ConfigError, StateError
from .policy import (
    KEY,
    NONKEY,
    OptState,
    PolicyArch,
    PolicyParams,
    backward_batch,
    dlogits_entropy,
    dlogits_logprob,
    effective_key_prob,
    entropy_batch,
    forward_batch,
    init_opt_state,
    init_params,
    rmsprop_step,
    save_checkpoint,
)

REWARD_MODES = ("groundtruth", "pseudo")
BASELINE_MODES = ("per-step", "mean-return", "none")
RETURN_MODES = ("reward-to-go", "total")


@dataclass(frozen=True)
class TrainConfig:
    eta: float = 0.06
    episode_len: int = 270
    trials: int = 32
    batch_episodes: int = 8
    total_episodes: int = 2400
    gamma: float = 1.0
    lambda1: float = 0.14
    epsilon: float = 0.98
    reward_mode: str = "groundtruth"
    reward_scale: float = 8.0
    lr: float = 0.001
    rho: float = 0.9
    seed: int = 0
    baseline_mode: str = "per-step"
    return_mode: str = "reward-to-go"
    hidden_sizes: tuple[int, ...] = (64, 64, 16)
    lkd_scale: float = 100.0
    normalize_inputs: bool = True
    norm_gap: int = 0
    checkpoint_every: int = 0
    wallclock: bool = False

    def validate(self) -> None:
        if not 0 < self.eta <= 1:
            raise ConfigError("eta", f"must lie in (0, 1], got {self.eta}")
        for name in ("episode_len", "trials", "batch_episodes"):
            if getattr(self, name) < 1:
                raise ConfigError(name, f"must be >= 1, got {getattr(self, name)}")
        if self.total_episodes < 0:
            raise ConfigError("total_episodes", "must be >= 0")
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma", f"must lie in (0, 1], got {self.gamma}")
        if self.lambda1 < 0:
            raise ConfigError("lambda1", "must be >= 0")
        if not 0.5 < self.epsilon <= 1:
            raise ConfigError("epsilon", f"must lie in (0.5, 1], got {self.epsilon}")
        if self.reward_mode not in REWARD_MODES:
            raise ConfigError("reward_mode", f"must be one of {REWARD_MODES}")
        if self.baseline_mode not in BASELINE_MODES:
            raise ConfigError("baseline_mode", f"must be one of {BASELINE_MODES}")
        if self.return_mode not in RETURN_MODES:
            raise ConfigError("return_mode", f"must be one of {RETURN_MODES}")
        if not self.reward_scale > 0:
            raise ConfigError("reward_scale", "must be positive")
        if not self.lr > 0:
            raise ConfigError("lr", "must be positive")
        if not 0 <= self.rho < 1:
            raise ConfigError("rho", "must lie in [0, 1)")
        if self.norm_gap < 0 or self.checkpoint_every < 0:
            raise ConfigError("norm_gap", "norm_gap and checkpoint_every must be >= 0")

    def arch(self, input_dim: int) -> PolicyArch:
        return PolicyArch(input_dim=input_dim, hidden_sizes=tuple(self.hidden_sizes), lkd_scale=self.lkd_scale)


@dataclass
class EpisodeRecord:
    """One constrained trial. Arrays are indexed by acted step (step 1 first)."""

    trace_index: int
    start: int
    episode_len: int
    eta: float
    deviation: np.ndarray
    expert: np.ndarray
    actions: np.ndarray
    probs: np.ndarray
    rewards: np.ndarray
    entropies: np.ndarray
    kar_before: np.ndarray
    stop_step: int
    violated: bool
    n_keys: int
    params_digest: str
    episode_id: int = 0

    @property
    def n_steps(self) -> int:
        return int(self.actions.size)

    @property
    def frames(self) -> np.ndarray:
        return self.start + 1 + np.arange(self.n_steps)

    @property
    def final_kar(self) -> float:
        return self.n_keys / self.episode_len

    def discounted_return(self, gamma: float) -> float:
        # acted steps sit at frame offsets 1..n; the forced key at offset 0 earns nothing
        return gamma * discounted_sum(self.rewards, gamma)


def discounted_sum(rewards, gamma: float) -> float:
    """sum_j gamma**j * rewards[j], with j counted from 0."""
    rewards = np.asarray(rewards, dtype=np.float64)
    return float(np.sum(gamma ** np.arange(rewards.size) * rewards))


def reward_groundtruth(trace: Trace, i: int, k: int, action: int) -> float:
    if action == NONKEY:
        return 0.0
    return float(trace.key_quality[i] - prop_quality(trace, i, k))


def reward_pseudo(trace: Trace, i: int, k: int, action: int) -> float:
    if action == NONKEY:
        return 0.0
    return float(1.0 - agreement(trace, i, k))


def _batch_reward(bank: TraceBank, tids, f, k, mode: str) -> np.ndarray:
    if mode == "groundtruth":
        return bank.key_quality(tids, f) - bank.prop_quality(tids, f, k)
    return 1.0 - bank.agreement(tids, f, k)


def rollout_batch(params: PolicyParams, bank: TraceBank, tids, starts, cfg: TrainConfig,
                  rng: np.random.Generator, episode_ids=None) -> list[EpisodeRecord]:
    """Run one constrained trial per row of (tids, starts) in lockstep."""
    tids = np.asarray(tids, dtype=np.int64)
    starts = np.asarray(starts, dtype=np.int64)
    N = tids.size
    M = cfg.episode_len
    if np.any(starts < 0) or np.any(starts + M >= bank.lengths[tids]):
        raise BoundsError("episode window runs past the end of its trace")
    d = bank.feature_dim
    digest = params.digest()
    last = starts.copy()
    keys = np.ones(N, dtype=np.int64)
    alive = np.ones(N, dtype=bool)
    stop = np.full(N, M, dtype=np.int64)
    violated = np.zeros(N, dtype=bool)
    n_acted = np.zeros(N, dtype=np.int64)

    X_all = np.zeros((M, N, d))
    E_all = np.zeros((M, N, 2))
    act_all = np.zeros((M, N), dtype=np.int64)
    prob_all = np.zeros((M, N))
    rew_all = np.zeros((M, N))
    ent_all = np.zeros((M, N))
    kar_all = np.zeros((M, N))

    for j in range(1, M + 1):
        kar = keys / M
        bad = alive & (kar > cfg.eta)
        stop[bad] = j
        violated[bad] = True
        alive &= ~bad
        rows = np.flatnonzero(alive)
        if rows.size == 0:
            break
        f = starts[rows] + j
        kr = last[rows]
        tr = tids[rows]
        X = bank.deviation(tr, f, kr)
        E = np.column_stack([kar[rows], (f - kr) / params.arch.lkd_scale])
        probs, logp, _ = forward_batch(params, X, E)
        pk = effective_key_prob(probs[:, KEY], cfg.epsilon)
        u = rng.random(rows.size)
        a = (u < pk).astype(np.int64)
        r = np.where(a == KEY, cfg.reward_scale * _batch_reward(bank, tr, f, kr, cfg.reward_mode), 0.0)
        s = j - 1
        X_all[s, rows] = X
        E_all[s, rows] = E
        act_all[s, rows] = a
        prob_all[s, rows] = np.where(a == KEY, pk, 1.0 - pk)
        rew_all[s, rows] = r
        ent_all[s, rows] = entropy_batch(probs, logp)
        kar_all[s, rows] = kar[rows]
        n_acted[rows] += 1
        last[rows] = np.where(a == KEY, f, kr)
        keys[rows] += a

    if episode_ids is None:
        episode_ids = np.arange(N)
    out = []
    for n in range(N):
        p = n_acted[n]
        out.append(EpisodeRecord(
            trace_index=int(tids[n]), start=int(starts[n]), episode_len=M, eta=cfg.eta,
            deviation=X_all[:p, n].copy(), expert=E_all[:p, n].copy(), actions=act_all[:p, n].copy(),
            probs=prob_all[:p, n].copy(), rewards=rew_all[:p, n].copy(), entropies=ent_all[:p, n].copy(),
            kar_before=kar_all[:p, n].copy(), stop_step=int(stop[n]), violated=bool(violated[n]),
            n_keys=int(keys[n]), params_digest=digest, episode_id=int(episode_ids[n])))
    return out


def rollout_constrained(params: PolicyParams, trace: Trace, t: int, cfg: TrainConfig,
                        rng: np.random.Generator) -> EpisodeRecord:
    return rollout_batch(params, TraceBank([trace]), [0], [t], cfg, rng)[0]


def episode_return(records, gamma: float) -> float:
    """Mean over trials of the discounted reward sum."""
    records = list(records)
    if not records:
        raise ValueError("episode_return needs at least one record")
    starts = {r.start for r in records}
    if len(starts) != 1:
        raise ValueError("all trials of an episode must share the same start frame")
    return float(np.mean([r.discounted_return(gamma) for r in records]))


def _returns_to_go(rewards: np.ndarray, gamma: float) -> np.ndarray:
    out = np.empty_like(rewards)
    acc = 0.0
    for t in range(rewards.size - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def _step_weights(records, cfg: TrainConfig) -> list[np.ndarray]:
    """Per-step advantage weights (return term minus baseline)."""
    G = []
    for r in records:
        if cfg.return_mode == "reward-to-go":
            G.append(_returns_to_go(r.rewards, cfg.gamma))
        else:
            G.append(np.full(r.n_steps, r.discounted_return(cfg.gamma)))
    if cfg.baseline_mode == "none":
        return G
    groups: dict[int, list[int]] = {}
    for idx, r in enumerate(records):
        groups.setdefault(r.episode_id, []).append(idx)
    out = [None] * len(records)
    for members in groups.values():
        if cfg.baseline_mode == "mean-return":
            b = float(np.mean([records[m].discounted_return(cfg.gamma) for m in members]))
            for m in members:
                out[m] = G[m] - b
        else:
            L = max(records[m].n_steps for m in members)
            padded = np.zeros((len(members), L))
            for row, m in enumerate(members):
                padded[row, :G[m].size] = G[m]
            b = padded.mean(axis=0)
            for m in members:
                out[m] = G[m] - b[:G[m].size]
    return out


def _stack(records):
    X = np.concatenate([r.deviation for r in records], axis=0)
    E = np.concatenate([r.expert for r in records], axis=0)
    A = np.concatenate([r.actions for r in records])
    return X, E, A


def _check_snapshot(records, params: PolicyParams) -> None:
    digest = params.digest()
    if any(r.params_digest != digest for r in records):
        raise StateError("records were not produced under the supplied parameter snapshot")


def surrogate_objective(records, params: PolicyParams, cfg: TrainConfig) -> float:
    """Value whose gradient the estimator returns: mean over trials of
    sum_t [log pi(a_t|s_t) * weight_t + lambda1 * H(pi(.|s_t))]."""
    records = list(records)
    W = np.concatenate(_step_weights(records, cfg))
    X, E, A = _stack(records)
    if A.size == 0:
        return 0.0
    probs, logp, _ = forward_batch(params, X, E)
    lp = logp[np.arange(A.size), A]
    H = entropy_batch(probs, logp)
    return float(np.sum(lp * W + cfg.lambda1 * H) / len(records))


def policy_gradient(records, params: PolicyParams, cfg: TrainConfig, check_snapshot: bool = True):
    """REINFORCE gradient estimate with entropy bonus; returns (grads, stats)."""
    records = list(records)
    if not records:
        raise ValueError("policy_gradient needs at least one record")
    if check_snapshot:
        _check_snapshot(records, params)
    W = np.concatenate(_step_weights(records, cfg))
    X, E, A = _stack(records)
    n = len(records)
    if A.size == 0:
        grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        return grads, {"mean_entropy": float("nan")}
    probs, logp, cache = forward_batch(params, X, E)
    dl = W[:, None] * dlogits_logprob(probs, A) + cfg.lambda1 * dlogits_entropy(probs, logp)
    grads = backward_batch(params, cache, dl / n)
    return grads, {"mean_entropy": float(np.mean(entropy_batch(probs, logp)))}


# -- training loop ------------------------------------------------------------

LOG_COLUMNS = ("episode", "mean_return", "mean_entropy", "realized_kar", "wallclock_ms")


@dataclass
class TrainLog:
    rows: list[tuple] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        j = LOG_COLUMNS.index(name)
        return np.array([r[j] for r in self.rows], dtype=float)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for ep, ret, ent, kar, ms in self.rows:
                w.writerow([ep, format(ret, ".17g"), format(ent, ".17g"), format(kar, ".17g"), ms])


def input_normalizer(bank: TraceBank, max_gap: int, max_rows: int = 20000):
    """Per-channel mean/std of deviation features over key gaps 0..max_gap."""
    tids, fs, ks = [], [], []
    for tid, n in enumerate(bank.lengths):
        for g in range(0, min(max_gap, n - 1) + 1):
            i = np.arange(g, n)
            tids.append(np.full(i.size, tid))
            fs.append(i)
            ks.append(i - g)
    tids = np.concatenate(tids)
    fs = np.concatenate(fs)
    ks = np.concatenate(ks)
    if tids.size > max_rows:
        sel = np.linspace(0, tids.size - 1, max_rows).astype(np.int64)
        tids, fs, ks = tids[sel], fs[sel], ks[sel]
    X = bank.deviation(tids, fs, ks)
    shift = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[~(scale > 1e-12)] = 1.0
    return shift, scale


def train(traces, cfg: TrainConfig, params: PolicyParams | None = None, opt: OptState | None = None,
          checkpoint_dir=None, progress=None):
    """Train a policy; returns (params, opt_state, TrainLog)."""
    cfg.validate()
    M = cfg.episode_len
    viable = [t for t in traces if t.n_frames > M]
    if not viable:
        raise ConfigError("traces", f"no trace has more than episode_len={M} frames")
    bank = TraceBank(viable)
    gen = np.random.Generator(np.random.PCG64(crng.derive_seed(cfg.seed, 0x7EA1)))
    if params is None:
        params = init_params(cfg.arch(bank.feature_dim), crng.derive_seed(cfg.seed, 0x1A17))
        if cfg.normalize_inputs:
            gap = cfg.norm_gap or min(M, int(math.ceil(2.0 / cfg.eta)))
            params.input_shift, params.input_scale = input_normalizer(bank, gap)
    if opt is None:
        opt = init_opt_state(params, lr=cfg.lr, rho=cfg.rho)
    log = TrainLog()
    B, K = cfg.batch_episodes, cfg.trials
    done = 0
    while done < cfg.total_episodes:
        t0 = time.perf_counter()
        b = min(B, cfg.total_episodes - done)
        tids = gen.integers(0, len(viable), size=b)
        starts = gen.integers(0, bank.lengths[tids] - M)
        ep_ids = np.repeat(np.arange(b), K)
        records = rollout_batch(params, bank, np.repeat(tids, K), np.repeat(starts, K), cfg, gen, ep_ids)
        grads, _ = policy_gradient(records, params, cfg)
        params, opt = rmsprop_step(params, grads, opt)
        ms = int(round((time.perf_counter() - t0) * 1000)) if cfg.wallclock else 0
        for e in range(b):
            group = records[e * K:(e + 1) * K]
            ents = np.concatenate([r.entropies for r in group])
            log.rows.append((done + e, episode_return(group, cfg.gamma),
                             float(ents.mean()) if ents.size else float("nan"),
                             float(np.mean([r.final_kar for r in group])), ms))
        prev = done
        done += b
        if checkpoint_dir is not None and cfg.checkpoint_every:
            if done // cfg.checkpoint_every > prev // cfg.checkpoint_every:
                save_checkpoint(Path(checkpoint_dir) / f"ckpt_{done:06d}.kpol", params, opt)
        if progress is not None:
            progress(done, log)
    return params, opt, log


def config_from_dict(d: dict) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    return replace(TrainConfig(), **{k: v for k, v in d.items() if k in names})
