import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from keysched import rng as crng
from keysched.env import SynthConfig, Trace, TraceBank, gen_trace
from keysched.errors import BoundsError, ConfigError, StateError
from keysched.policy import (
    KEY,
    NONKEY,
    PolicyArch,
    SchedulerState,
    grad_entropy,
    grad_logprob,
    flatten,
    init_params,
    unflatten,
    zero_params,
)
from keysched.trainer import (
    TrainConfig,
    discounted_sum,
    episode_return,
    policy_gradient,
    reward_groundtruth,
    reward_pseudo,
    rollout_batch,
    rollout_constrained,
    surrogate_objective,
    train,
)

SMALL = PolicyArch(input_dim=8, hidden_sizes=(6, 5))


def small_cfg(**kw):
    base = dict(eta=0.1, episode_len=40, trials=4, batch_episodes=2, total_episodes=8,
                hidden_sizes=(6, 5), reward_scale=20.0)
    base.update(kw)
    return TrainConfig(**base)


def alternating_params():
    """Keys exactly when LKD reaches 2 (lkd_scale 1), so actions alternate."""
    p = zero_params(PolicyArch(input_dim=8, hidden_sizes=(4,), lkd_scale=1.0))
    p.tensors["W1"][-1] = [0.0, 100.0]
    p.tensors["b1"][:] = [0.0, -150.0]
    return p


def always_key_params(arch=SMALL):
    p = zero_params(arch)
    p.tensors[f"b{arch.n_layers - 1}"][:] = [-50.0, 50.0]
    return p


@pytest.fixture(scope="module")
def trace():
    return gen_trace(SynthConfig(n_frames=400), 5)


# -- rewards and returns -------------------------------------------------------------

def hand_reward_trace():
    return Trace(key_quality=np.full(3, 0.9), motion=np.array([0.0, 10.0, 0.0]), beta=0.0)


def test_reward_examples():
    t = hand_reward_trace()
    assert reward_groundtruth(t, 1, 0, KEY) == pytest.approx(0.2, abs=1e-12)
    assert reward_pseudo(t, 1, 0, KEY) == pytest.approx(0.2, abs=1e-12)
    for fn in (reward_groundtruth, reward_pseudo):
        assert fn(t, 1, 0, NONKEY) == 0.0
        assert fn(t, 2, 2, KEY) == 0.0


def test_reward_modes_agree_on_small_trace():
    t = gen_trace(SynthConfig(n_frames=60, motion_mean=0.5), 2)
    for i in range(60):
        for k in range(i + 1):
            assert abs(reward_groundtruth(t, i, k, KEY) - reward_pseudo(t, i, k, KEY)) <= 1e-12


def test_discounted_sum_and_episode_return_examples():
    assert discounted_sum([0.2, 0.4], 0.5) == pytest.approx(0.4)
    recs = rollout_batch(zero_params(PolicyArch()), TraceBank([gen_trace(SynthConfig(n_frames=100), 1)]),
                         [0, 0], [3, 3], TrainConfig(eta=1.0, episode_len=10, reward_scale=1.0),
                         np.random.default_rng(0))
    recs[0].rewards[:] = 0.0
    recs[1].rewards[:] = 0.0
    assert episode_return(recs, 1.0) == 0.0
    recs[0].rewards[:2] = [0.1, 0.3]
    recs[1].rewards[:2] = [0.6, 0.0]
    assert episode_return(recs, 1.0) == pytest.approx(0.5)


def test_episode_return_errors(trace):
    with pytest.raises(ValueError):
        episode_return([], 1.0)
    cfg = small_cfg()
    a = rollout_constrained(zero_params(SMALL), trace, 0, cfg, np.random.default_rng(0))
    b = rollout_constrained(zero_params(SMALL), trace, 5, cfg, np.random.default_rng(0))
    with pytest.raises(ValueError):
        episode_return([a, b], 1.0)


# -- constrained rollouts --------------------------------------------------------------

@given(st.sampled_from([0.04, 0.06, 0.14, 0.3]), st.integers(0, 10**6), st.sampled_from([0.0, 2.0]))
def test_constraint_soundness(eta, seed, bias):
    t = gen_trace(SynthConfig(n_frames=200), seed)
    p = init_params(SMALL, seed)
    p.tensors["b2"][:] = [0.0, bias]
    cfg = small_cfg(eta=eta, episode_len=80)
    recs = rollout_batch(p, TraceBank([t]), np.zeros(6, dtype=int), np.arange(6) * 20, cfg,
                         np.random.default_rng(seed))
    for r in recs:
        assert np.all(r.kar_before <= eta)
        assert np.all(r.rewards[r.actions == NONKEY] == 0.0)
        assert r.n_keys == 1 + int(r.actions.sum())
        if r.violated:
            # the stop step itself carries a strict violation
            assert r.n_keys / cfg.episode_len > eta
            assert r.n_steps == r.stop_step - 1
        else:
            assert r.n_steps == r.stop_step == cfg.episode_len


def test_eta_one_never_stops(trace):
    r = rollout_constrained(always_key_params(), trace, 0, small_cfg(eta=1.0, epsilon=1.0), np.random.default_rng(0))
    assert r.n_steps == 40 and r.actions.sum() == 40 and r.stop_step == 40


def test_eta_below_one_over_m_stops_at_first_step(trace):
    r = rollout_constrained(zero_params(SMALL), trace, 0, small_cfg(eta=0.01, episode_len=50),
                            np.random.default_rng(0))
    assert (r.stop_step, r.n_steps, r.violated, r.n_keys) == (1, 0, True, 1)


def test_alternating_policy_runs_to_end(trace):
    r = rollout_constrained(alternating_params(), trace, 10, TrainConfig(eta=0.5, epsilon=1.0),
                            np.random.default_rng(0))
    assert r.n_steps == 270 and not r.violated
    assert r.actions.tolist() == [0, 1] * 135
    assert r.kar_before.max() == 0.5


def test_rollout_window_overflow(trace):
    with pytest.raises(BoundsError):
        rollout_constrained(zero_params(SMALL), trace, 400 - 40, small_cfg(), np.random.default_rng(0))


def test_batch_rollout_matches_single(trace):
    cfg = small_cfg(eta=0.14)
    p = init_params(SMALL, 3)
    bank = TraceBank([trace])
    a = rollout_batch(p, bank, [0, 0, 0], [0, 50, 100], cfg, np.random.default_rng(9))
    assert [r.start for r in a] == [0, 50, 100]
    assert all(r.params_digest == p.digest() for r in a)


# -- gradient estimator -----------------------------------------------------------------

def frozen_batch(seed, cfg):
    t = gen_trace(SynthConfig(n_frames=150), seed)
    p = init_params(SMALL, seed)
    p.tensors["b2"][:] = [0.0, -1.0]
    recs = rollout_batch(p, TraceBank([t]), [0] * 6, [0, 0, 0, 40, 40, 40], cfg, np.random.default_rng(seed),
                         episode_ids=[0, 0, 0, 1, 1, 1])
    return p, recs


@pytest.mark.parametrize("baseline", ["per-step", "mean-return", "none"])
@pytest.mark.parametrize("ret", ["reward-to-go", "total"])
def test_gradient_matches_surrogate_fd(baseline, ret):
    cfg = small_cfg(eta=0.2, baseline_mode=baseline, return_mode=ret, gamma=0.97)
    p, recs = frozen_batch(4, cfg)
    g = flatten(policy_gradient(recs, p, cfg)[0], SMALL)
    theta = flatten(p.tensors, SMALL)
    h = 1e-6
    fd = np.empty_like(theta)
    for j in range(theta.size):
        vals = []
        for sgn in (1, -1):
            q = p.copy()
            v = theta.copy()
            v[j] += sgn * h
            q.tensors = unflatten(v, SMALL)
            vals.append(surrogate_objective(recs, q, cfg))
        fd[j] = (vals[0] - vals[1]) / (2 * h)
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) <= 1e-4


def test_zero_rewards_leave_only_entropy_term():
    cfg = small_cfg(eta=0.2, baseline_mode="none", reward_scale=0.0)
    p, recs = frozen_batch(6, cfg)
    g, _ = policy_gradient(recs, p, cfg)
    g_ent, _ = policy_gradient(recs, p, replace(cfg, lambda1=0.0))
    assert all(np.all(v == 0) for v in g_ent.values())
    # with lambda1 only, the gradient is lambda1 times the mean-entropy gradient per trial
    g1, _ = policy_gradient(recs, p, replace(cfg, lambda1=1.0))
    for k in g:
        assert np.allclose(g[k], 0.14 * g1[k], rtol=1e-12, atol=1e-15)


def test_single_step_collapse(trace):
    cfg = small_cfg(eta=1.0, episode_len=2, baseline_mode="none", lambda1=0.3)
    p = init_params(SMALL, 2)
    rec = rollout_constrained(p, trace, 7, cfg, np.random.default_rng(1))
    rec = replace(rec, actions=rec.actions[:1], rewards=np.array([0.25]), deviation=rec.deviation[:1],
                  expert=rec.expert[:1], probs=rec.probs[:1], entropies=rec.entropies[:1],
                  kar_before=rec.kar_before[:1])
    s = SchedulerState(rec.deviation[0], rec.expert[0, 0], int(round(rec.expert[0, 1] * 100)))
    gl = grad_logprob(p, s, int(rec.actions[0]))
    ge = grad_entropy(p, s)
    g, _ = policy_gradient([rec], p, cfg)
    for k in g:
        assert np.allclose(g[k], 0.25 * gl[k] + 0.3 * ge[k], rtol=1e-10, atol=1e-14)


def test_score_function_mean_is_zero():
    # constant returns with lambda1 = 0: expectation over sampled actions vanishes
    arch = PolicyArch(input_dim=8, hidden_sizes=(3,))
    cfg = TrainConfig(eta=1.0, episode_len=4, epsilon=1.0, lambda1=0.0, baseline_mode="none",
                      return_mode="total", hidden_sizes=(3,))
    p = init_params(arch, 8)
    p.tensors["b1"][:] = [0.0, 0.4]
    bank = TraceBank([gen_trace(SynthConfig(n_frames=20), 3)])
    gen = np.random.default_rng(0)
    samples = []
    for _ in range(4000):
        (rec,) = rollout_batch(p, bank, [0], [2], cfg, gen)
        rec.rewards[:] = 0.0
        rec.rewards[-1] = 1.0
        samples.append(flatten(policy_gradient([rec], p, cfg)[0], arch))
    S = np.array(samples)
    se = S.std(axis=0) / math.sqrt(len(S))
    assert np.all(np.abs(S.mean(axis=0)) <= 5 * se + 1e-12)


def test_snapshot_mismatch_raises():
    cfg = small_cfg()
    p, recs = frozen_batch(1, cfg)
    q = p.copy()
    q.tensors["b0"][0] += 1e-9
    with pytest.raises(StateError):
        policy_gradient(recs, q, cfg)


# -- training loop ----------------------------------------------------------------------

def train_traces():
    return [gen_trace(SynthConfig(n_frames=120), s) for s in range(3)]


def test_zero_episodes_returns_init():
    cfg = small_cfg(total_episodes=0)
    p, opt, log = train(train_traces(), cfg)
    ref = init_params(cfg.arch(8), crng.derive_seed(cfg.seed, 0x1A17))
    assert all(np.array_equal(p.tensors[k], ref.tensors[k]) for k in ref.tensors)
    assert log.rows == [] and all(np.all(a == 0) for a in opt.acc.values())


def test_training_is_deterministic():
    cfg = small_cfg(total_episodes=6)
    a = train(train_traces(), cfg)
    b = train(train_traces(), cfg)
    assert a[0] == b[0] and a[1] == b[1] and a[2].rows == b[2].rows
    assert len(a[2].rows) == 6 and a[2].rows[-1][0] == 5
    c = train(train_traces(), replace(cfg, seed=1))
    assert not a[0] == c[0]


def test_large_entropy_weight_keeps_policy_stochastic():
    cfg = small_cfg(lambda1=10.0, total_episodes=48, lr=0.01)
    _, _, log = train(train_traces(), cfg)
    assert log.column("mean_entropy")[-8:].mean() >= 0.6


def test_train_needs_long_enough_trace():
    with pytest.raises(ConfigError):
        train([gen_trace(SynthConfig(n_frames=40), 0)], small_cfg())


def test_train_log_csv(tmp_path):
    _, _, log = train(train_traces(), small_cfg(total_episodes=3))
    log.write_csv(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "episode,mean_return,mean_entropy,realized_kar,wallclock_ms"
    assert len(lines) == 4 and lines[1].endswith(",0")


def test_checkpoints_written(tmp_path):
    train(train_traces(), small_cfg(total_episodes=6, batch_episodes=2, checkpoint_every=4), checkpoint_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["ckpt_000004.kpol"]


@pytest.mark.parametrize("kw", [dict(eta=0.0), dict(eta=1.5), dict(trials=0), dict(gamma=0.0),
                                dict(reward_mode="x"), dict(baseline_mode="x"), dict(total_episodes=-1)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        small_cfg(**kw).validate()
