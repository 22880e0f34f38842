import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ballista.env import ACT_DIM, OBS_DIM, EnvConfig, VecThrowEnv
from ballista.errors import InvalidArgumentError, NumericalFault
from ballista.learner import (LR_MAX, LR_MIN, ActorCritic, PPOConfig, RolloutBuffer,
                              adapt_learning_rate, clipped_surrogate, collect, compute_gae,
                              load_checkpoint, make_optimizer, normalize_advantages,
                              read_checkpoint_layout, save_checkpoint, train_bandit, update)

GAMMA, LAM = 0.99, 0.93


def gae_double_sum(rewards, values, dones, last_value, gamma, lam):
    """A_t = sum_k (gamma lam)^k delta_{t+k}, truncated at the first episode end."""
    T = len(rewards)
    nxt = list(values[1:]) + [last_value]
    delta = [rewards[t] + gamma * nxt[t] * (1 - dones[t]) - values[t] for t in range(T)]
    adv = []
    for t in range(T):
        total = 0.0
        for k in range(T - t):
            total += (gamma * lam) ** k * delta[t + k]
            if dones[t + k]:
                break
        adv.append(total)
    return np.array(adv)


@pytest.mark.parametrize("dones", [(0, 0, 0), (0, 1, 0), (1, 0, 1)])
def test_gae_matches_double_sum(dones):
    rewards, values, last = [1.0, 0.5, 2.0], [0.3, 0.2, 0.1], 0.4
    adv, ret = compute_gae(np.array(rewards)[:, None], np.array(values)[:, None],
                           np.array(dones)[:, None], [last], GAMMA, LAM)
    ref = gae_double_sum(rewards, values, dones, last, GAMMA, LAM)
    assert np.max(np.abs(adv[:, 0] - ref)) < 1e-12
    assert np.allclose(ret[:, 0], ref + np.array(values), atol=1e-15)


def test_gae_hand_worked_no_done():
    # deltas: 1 + .99*.2 - .3 = .898 ; .5 + .99*.1 - .2 = .399 ; 2 + .99*.4 - .1 = 2.296
    c = GAMMA * LAM
    expect = [0.898 + c * 0.399 + c * c * 2.296, 0.399 + c * 2.296, 2.296]
    adv, _ = compute_gae(np.array([[1.0], [0.5], [2.0]]), np.array([[0.3], [0.2], [0.1]]),
                         np.zeros((3, 1)), [0.4], GAMMA, LAM)
    assert np.max(np.abs(adv[:, 0] - expect)) < 1e-12


def test_single_done_transition():
    adv, ret = compute_gae([[1.0]], [[0.0]], [[1.0]], [123.0], GAMMA, LAM)
    assert adv[0, 0] == 1.0 and ret[0, 0] == 1.0


def test_perfect_critic_gives_zero_advantage():
    r = np.array([0.5, -1.0, 3.0])
    v = np.array([r[0] + GAMMA * r[1] + GAMMA ** 2 * r[2], r[1] + GAMMA * r[2], r[2]])
    adv, ret = compute_gae(r[:, None], v[:, None], np.array([0, 0, 1])[:, None], [7.0],
                           GAMMA, LAM)
    assert np.max(np.abs(adv)) < 1e-9
    assert np.allclose(ret[:, 0], v)


def test_gae_envs_are_independent():
    rng = np.random.default_rng(0)
    r, v = rng.normal(size=(26, 5)), rng.normal(size=(26, 5))
    d = rng.random((26, 5)) < 0.1
    last = rng.normal(size=5)
    adv, _ = compute_gae(r, v, d, last, GAMMA, LAM)
    for j in range(5):
        ref = gae_double_sum(r[:, j], v[:, j], d[:, j], last[j], GAMMA, LAM)
        assert np.max(np.abs(adv[:, j] - ref)) < 1e-12


@given(arrays(np.float64, st.integers(8, 500), elements=st.floats(-1e3, 1e3)))
def test_advantage_normalization(a):
    if a.std() < 1e-3:
        return
    n = normalize_advantages(a)
    assert abs(n.mean()) < 1e-6
    assert 1 - 1e-3 <= n.std() <= 1 + 1e-3


def test_clipped_surrogate_gradient_matches_finite_differences():
    torch.set_default_dtype(torch.float64)
    try:
        rng = np.random.default_rng(1)
        theta0 = torch.tensor([0.1, -0.2, math.log(0.5), math.log(0.4)])
        actions = torch.as_tensor(rng.normal(0, 0.5, (16, 2)))
        adv = torch.as_tensor(rng.normal(size=16))

        def logp(theta):
            d = torch.distributions.Normal(theta[:2], theta[2:].exp())
            return d.log_prob(actions).sum(-1)

        old = logp(theta0).detach()
        theta = theta0 + torch.tensor([0.15, 0.1, -0.05, 0.08])
        ratio = torch.exp(logp(theta) - old)
        # both regimes present, no ratio sitting on a kink
        outside = (ratio - 1).abs() > 0.15
        assert outside.any() and (~outside).any()
        assert ((ratio - 0.85).abs().min() > 1e-3) and ((ratio - 1.15).abs().min() > 1e-3)

        def objective(t):
            return clipped_surrogate(torch.exp(logp(t) - old), adv, 0.15)

        th = theta.clone().requires_grad_(True)
        objective(th).backward()
        eps = 1e-6
        fd = torch.zeros(4)
        for i in range(4):
            e = torch.zeros(4)
            e[i] = eps
            fd[i] = (objective(theta + e) - objective(theta - e)) / (2 * eps)
        rel = (th.grad - fd).norm() / fd.norm()
        assert rel < 1e-4
    finally:
        torch.set_default_dtype(torch.float32)


@given(st.floats(0.01, 3.0), st.floats(-5, 5).filter(lambda a: abs(a) > 1e-3))
def test_clipping_never_rewards_out_of_band_ratio(r, a):
    ratio = torch.tensor([r], dtype=torch.float64, requires_grad=True)
    clipped_surrogate(ratio, torch.tensor([a], dtype=torch.float64), 0.15).backward()
    g = ratio.grad.item()
    if (a > 0 and r > 1.15) or (a < 0 and r < 0.85):
        assert g == 0.0
    else:
        assert g == pytest.approx(a)


@pytest.mark.parametrize("kl, expect", [(0.05, 1e-3 / 1.5), (0.005, 1.5e-3), (0.02, 1e-3),
                                        (0.0, 1.5e-3), (float("nan"), 5e-4),
                                        (float("inf"), 5e-4)])
def test_lr_adaptation_rules(kl, expect):
    assert adapt_learning_rate(1e-3, kl, 0.02) == pytest.approx(expect)


def test_lr_adaptation_clamps():
    assert adapt_learning_rate(LR_MAX, 0.0, 0.02) == LR_MAX
    assert adapt_learning_rate(LR_MIN, 1.0, 0.02) == LR_MIN


def _toy_buffer(policy, n=64, horizon=4, seed=0):
    rng = np.random.default_rng(seed)
    buf = RolloutBuffer(horizon, n, policy.obs_dim, policy.act_dim)
    buf.obs[:] = rng.normal(size=buf.obs.shape)
    gen = torch.Generator().manual_seed(seed)
    for t in range(horizon):
        a, lp, v = policy.act(buf.obs[t], gen)
        buf.actions[t], buf.log_probs[t], buf.values[t] = a, lp, v
    buf.rewards[:] = rng.normal(size=buf.rewards.shape)
    buf.advantages, buf.returns = compute_gae(buf.rewards, buf.values, buf.dones,
                                              buf.last_values, GAMMA, LAM)
    return buf


def test_unchanged_policy_raises_learning_rate():
    torch.manual_seed(0)
    policy = ActorCritic(3, 2, (16, 16))
    cfg = PPOConfig(epochs=1, minibatches=1, steps_per_env=4)
    opt = make_optimizer(policy, cfg)
    stats = update(policy, opt, _toy_buffer(policy), cfg)
    assert stats["kl"] < 1e-10
    assert stats["clip_frac"] == 0.0
    assert stats["lr"] == pytest.approx(1.5e-3)


def test_zero_advantage_trains_only_the_critic():
    torch.manual_seed(1)
    policy = ActorCritic(3, 2, (16, 16))
    cfg = PPOConfig(epochs=1, minibatches=1, steps_per_env=4)
    opt = make_optimizer(policy, cfg)
    buf = _toy_buffer(policy)
    buf.advantages[:] = 0.0
    actor = [p.detach().clone() for p in policy.actor.parameters()] + [policy.log_std.detach().clone()]
    critic = [p.detach().clone() for p in policy.critic.parameters()]
    stats = update(policy, opt, buf, cfg)
    assert stats["policy_loss"] == 0.0
    decay = 1.0 - stats["lr"] * cfg.weight_decay
    after = list(policy.actor.parameters()) + [policy.log_std]
    for old, new in zip(actor, after):
        # decoupled weight decay is the only change without a policy gradient
        assert torch.allclose(new.detach(), old * decay, rtol=1e-6, atol=1e-9)
    assert any(not torch.equal(o, n.detach()) for o, n in zip(critic, policy.critic.parameters()))


def test_clip_fraction_counts_out_of_band_ratios():
    torch.manual_seed(2)
    policy = ActorCritic(3, 2, (16, 16))
    cfg = PPOConfig(epochs=8, minibatches=2, steps_per_env=4, learning_rate=1e-2,
                    desired_kl=1.0)
    opt = make_optimizer(policy, cfg)
    buf = _toy_buffer(policy, seed=3)
    buf.advantages = np.sign(buf.advantages) * 5.0
    stats = update(policy, opt, buf, cfg)
    assert 0.0 < stats["clip_frac"] <= 1.0
    assert stats["kl"] > 0.0


def test_uneven_minibatch_split_covers_batch():
    torch.manual_seed(3)
    policy = ActorCritic(3, 2, (8,))
    cfg = PPOConfig(epochs=1, minibatches=6, steps_per_env=4)
    opt = make_optimizer(policy, cfg)
    buf = _toy_buffer(policy, n=7)  # 28 samples over 6 minibatches
    stats = update(policy, opt, buf, cfg)
    assert stats["skipped"] == 0 and np.isfinite(stats["value_loss"])
    with pytest.raises(InvalidArgumentError):
        update(policy, opt, _toy_buffer(policy, n=1, horizon=4), PPOConfig(minibatches=6))


def test_bandit_converges_to_optimum():
    means = train_bandit(iterations=200, seed=0)
    assert abs(means[-1] - 0.7) <= 0.05


def _env(n=256, seed=0, **kw):
    env = VecThrowEnv(n, env_cfg=EnvConfig(**kw), seeds=seed)
    return env, env.reset()


def test_collect_fills_full_buffer():
    torch.manual_seed(0)
    policy = ActorCritic(OBS_DIM, ACT_DIM)
    env, obs = _env()
    buf, _, _, est = collect(policy, env, 26, obs, torch.Generator().manual_seed(0))
    assert len(buf) == 6656 and buf.obs.shape == (26, 256, OBS_DIM)
    assert est.shape == (6656,)


def test_deterministic_collection_is_repeatable():
    torch.manual_seed(0)
    policy = ActorCritic(OBS_DIM, ACT_DIM)
    bufs = []
    for _ in range(2):
        env, obs = _env(32, seed=4)
        bufs.append(collect(policy, env, 26, obs, deterministic=True)[0])
    for name in ("obs", "actions", "log_probs", "values", "rewards", "dones"):
        assert np.array_equal(getattr(bufs[0], name), getattr(bufs[1], name))


def test_episode_returns_match_buffer_rewards():
    torch.manual_seed(5)
    policy = ActorCritic(OBS_DIM, ACT_DIM)
    env, obs = _env(32, seed=6, max_episode_steps=8)
    buf, _, episodes, _ = collect(policy, env, 26, obs, torch.Generator().manual_seed(1))
    running = np.zeros(32)
    ends = []
    for t in range(26):
        running += buf.rewards[t]
        for i in np.flatnonzero(buf.dones[t]):
            ends.append(running[i])
            running[i] = 0.0
    returns = np.concatenate([e["return"] for e in episodes])
    assert len(ends) == len(returns) > 32
    assert np.allclose(ends, returns, atol=1e-9)


def test_non_finite_policy_output_raises():
    policy = ActorCritic(OBS_DIM, ACT_DIM)
    with torch.no_grad():
        policy.actor[0].weight.fill_(float("nan"))
    env, obs = _env(4)
    with pytest.raises(NumericalFault):
        collect(policy, env, 26, obs)


def test_checkpoint_roundtrip(tmp_path):
    torch.manual_seed(7)
    scale = np.linspace(1, 3, OBS_DIM)
    policy = ActorCritic(OBS_DIM, ACT_DIM, obs_scale=scale)
    with torch.no_grad():
        policy.log_std.add_(0.1)
    path = tmp_path / "p.bin"
    save_checkpoint(path, policy)
    assert read_checkpoint_layout(path) == (OBS_DIM, ACT_DIM, (256, 128, 64))
    loaded = load_checkpoint(path, OBS_DIM, ACT_DIM)
    x = torch.randn(10, OBS_DIM)
    a, b = policy(x), loaded(x)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])
    assert np.array_equal(loaded.std, policy.std)


def test_checkpoint_mismatch_and_corruption(tmp_path):
    path = tmp_path / "p.bin"
    save_checkpoint(path, ActorCritic(OBS_DIM, ACT_DIM))
    with pytest.raises(InvalidArgumentError):
        load_checkpoint(path, expect_obs_dim=OBS_DIM + 1)
    data = path.read_bytes()
    (tmp_path / "short.bin").write_bytes(data[:-8])
    with pytest.raises(InvalidArgumentError):
        load_checkpoint(tmp_path / "short.bin")
    (tmp_path / "bad.bin").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(InvalidArgumentError):
        load_checkpoint(tmp_path / "bad.bin")


def test_config_defaults_and_validation():
    cfg = PPOConfig()
    assert (cfg.clip, cfg.gae_lambda, cfg.gamma, cfg.steps_per_env, cfg.minibatches,
            cfg.entropy_coef, cfg.desired_kl, cfg.value_loss_coef) == \
        (0.15, 0.93, 0.99, 26, 6, 0.0, 0.02, 0.98)
    assert cfg.hidden == (256, 128, 64) and cfg.init_std == 0.5
    assert np.allclose(ActorCritic(OBS_DIM, ACT_DIM).std, 0.5)
    for bad in (dict(clip=1.0), dict(gamma=0.0), dict(minibatches=0), dict(init_std=0.0)):
        with pytest.raises(InvalidArgumentError):
            PPOConfig(**bad)
    assert isinstance(make_optimizer(ActorCritic(2, 1, (4,)), cfg), torch.optim.AdamW)
