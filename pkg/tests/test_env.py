import json
from dataclasses import replace

import numpy as np
import pytest

from ballista.ballistics import BallisticModel, ReleaseState, min_distance_bruteforce
from ballista.curriculum import CurriculumState
from ballista.env import (ACT_DIM, OBS_DIM, EnvConfig, ThrowEnv, TraceWriter, VecThrowEnv,
                          batch_step, fade_factor)
from ballista.errors import InvalidArgumentError
from ballista.plant import PlantConfig
from ballista.task import RewardConfig, roll_penalty, throwing_reward

RC = RewardConfig.humanoid()
DT = EnvConfig().control_dt


def hold(release=0.0, **arm):
    a = np.zeros(ACT_DIM)
    a[5] = release
    for k, v in arm.items():
        a[int(k[1:])] = v
    return a


def swing_actions(n_steps, release_at):
    """Wind the arm back, whip it forward and release on ``release_at``."""
    out = []
    for k in range(n_steps):
        a = np.zeros(ACT_DIM)
        a[2:5] = (-0.8, -1.0, -0.5) if k < 10 else (1.0, 1.0, 1.0)
        a[5] = 1.5 if k == release_at else 0.0
        out.append(a)
    return out


def test_reset_is_deterministic():
    a = ThrowEnv(seed=3).reset()
    b = ThrowEnv(seed=3).reset()
    c = ThrowEnv(seed=4).reset()
    assert a.shape == (OBS_DIM,)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_distance_task_starts_at_four_metres():
    env = VecThrowEnv(16, curriculum=CurriculumState.initial("humanoid", "distance"), seeds=1)
    obs = env.reset()
    assert np.all(obs[:, 5] == 4.0)
    assert np.all(obs[:, 3] == 0.0)


def test_ball_released_zero_at_reset():
    obs = VecThrowEnv(8, seeds=2).reset()
    assert np.all(obs[:, 22] == 0.0)


def test_detach_follows_release_by_delay():
    for k in (0, 3, 11):
        env = ThrowEnv(seed=0)
        env.reset()
        for step in range(40):
            _, _, done, info = env.step(hold(1.2 if step == k else 0.0))
            if info.released:
                break
        assert info.detach_time - k * DT == pytest.approx(0.1, abs=DT + 1e-12)


def test_release_below_threshold_never_detaches():
    env = ThrowEnv(seed=0)
    env.reset()
    done = False
    n = 0
    while not done:
        _, _, done, info = env.step(hold(0.5))
        n += 1
    assert n == EnvConfig().max_episode_steps
    assert not info.released and info.stability == 0.0


def test_exactly_one_is_not_a_release():
    env = ThrowEnv(seed=0)
    env.reset()
    for _ in range(10):
        obs, *_ = env.step(hold(1.0))
    assert obs[22] == 0.0


def test_emitted_reward_matches_bruteforce_oracle():
    checked = 0
    for seed, release_at in [(0, 13), (1, 14), (2, 12), (5, 15)]:
        env = ThrowEnv(seed=seed)
        env.reset()
        vec = env.vec
        for a in swing_actions(60, release_at):
            _, rew, done, _ = env.step(a)
            if vec.emitted[0]:
                roll = RC.lambda3 * roll_penalty(vec.state.alpha[0], RC)
                r = vec.command[0, 2]
                ball = ReleaseState(vec.state.ball_pos[0].copy(), vec.state.ball_vel[0].copy())
                E_ref = min_distance_bruteforce(ball, vec.target[0], BallisticModel.vacuum())
                throw = rew - roll - (RC.lambda2 * float(vec.episode_summary(0).stability)
                                      if done else 0.0)
                assert abs(vec.E[0] - E_ref) < 1e-4
                assert abs(throw / RC.lambda1 - (1.0 - min(E_ref / r, 1.0))) < 1e-4
                assert np.linalg.norm(ball.position - vec.release_pos[0]) > 0
                checked += 1
                break
            if done:
                break
    assert checked == 4


def test_throw_reward_paid_once_per_episode():
    rng = np.random.default_rng(0)
    for seed in range(12):
        env = ThrowEnv(seed=seed)
        env.reset()
        vec = env.vec
        payments = 0
        done = False
        while not done:
            a = rng.uniform(-1, 1, ACT_DIM)
            a[5] = rng.uniform(0, 1.1)
            before = bool(vec.emitted[0])
            _, _, done, info = env.step(a)
            payments += int(vec.emitted[0] and not before)
        assert payments == int(info.released)


def test_reward_total_decomposes_per_episode():
    n = 64
    env = VecThrowEnv(n, seeds=5)
    env.reset()
    rng = np.random.default_rng(1)
    running = np.zeros(n)
    episodes = 0
    for _ in range(250):
        a = rng.uniform(-1, 1, (n, ACT_DIM))
        a[:, 5] = rng.uniform(0, 1.3, n)
        _, rew, done, info = env.step(a)
        running += rew
        if info["episode"] is not None:
            ep = info["episode"]
            for j, i in enumerate(ep["env"]):
                expect = (RC.lambda1 * ep["throwing_reward"][j] * ep["released"][j]
                          + RC.lambda2 * ep["stability"][j] + ep["roll_term"][j])
                assert running[i] == pytest.approx(expect, abs=1e-9)
                assert ep["return"][j] == pytest.approx(running[i], abs=1e-9)
                if ep["released"][j]:
                    assert ep["throwing_reward"][j] == pytest.approx(
                        throwing_reward(ep["E"][j], ep["r"][j]), abs=1e-15)
                else:
                    assert np.isnan(ep["E"][j]) and ep["stability"][j] == 0.0
                running[i] = 0.0
                episodes += 1
    assert episodes > 50


def test_release_latch_is_monotone():
    env = ThrowEnv(seed=6)
    env.reset()
    rng = np.random.default_rng(2)
    flags = []
    done = False
    while not done:
        a = rng.uniform(-1, 1, ACT_DIM)
        a[5] = rng.uniform(0, 1.2)
        obs, _, done, _ = env.step(a)
        flags.append(obs[22])
    assert np.all(np.diff(flags) >= 0) and flags[-1] == 1.0


def test_actions_zeroed_after_post_release_delay():
    cfg = EnvConfig()
    zero_from = cfg.zero_delay_steps
    rng = np.random.default_rng(3)

    def run(divert_at):
        env = ThrowEnv(seed=9)
        env.reset()
        env.step(hold(1.5))
        qs = []
        while not env.vec.detached[0]:
            env.step(hold())
        for k in range(25):
            a = rng.uniform(-1, 1, ACT_DIM) if k >= divert_at else np.full(ACT_DIM, 0.3)
            env.step(a)
            qs.append(env.vec.state.q[0].copy())
        return np.array(qs)

    base, late, early = run(99), run(zero_from), run(zero_from - 1)
    assert np.array_equal(base, late)
    assert not np.allclose(base, early)
    assert cfg.zero_delay_steps * DT >= 0.25 - 1e-12


def test_batch_of_one_equals_row_of_batch():
    seeds = [11, 12, 13]
    big = VecThrowEnv(3, seeds=seeds, auto_reset=False)
    small = VecThrowEnv(1, seeds=[12], auto_reset=False)
    ob, os_ = big.reset(), small.reset()
    assert np.array_equal(ob[1], os_[0])
    rng = np.random.default_rng(4)
    for _ in range(30):
        a = rng.uniform(-1, 1, (3, ACT_DIM))
        ob, rb, db, _ = big.step(a)
        os_, rs, ds, _ = small.step(a[1:2])
        assert np.array_equal(ob[1], os_[0]) and rb[1] == rs[0] and db[1] == ds[0]
        if db.any():
            break


def test_permuting_env_order_permutes_outputs():
    n = 256
    seeds = np.arange(1000, 1000 + n)
    perm = np.random.default_rng(5).permutation(n)
    a = VecThrowEnv(n, seeds=seeds)
    b = VecThrowEnv(n, seeds=seeds[perm])
    oa, ob = a.reset(), b.reset()
    assert np.array_equal(oa[perm], ob)
    rng = np.random.default_rng(6)
    for _ in range(40):
        act = rng.uniform(-1, 1.2, (n, ACT_DIM))
        oa, ra, da, _ = a.step(act)
        ob, rb, db, _ = b.step(act[perm])
        assert np.array_equal(oa[perm], ob)
        assert np.array_equal(ra[perm], rb) and np.array_equal(da[perm], db)


def test_action_shape_mismatch_rejected():
    env = VecThrowEnv(4, seeds=0)
    env.reset()
    with pytest.raises(InvalidArgumentError):
        batch_step(env, np.zeros((3, ACT_DIM)))
    with pytest.raises(InvalidArgumentError):
        env.step(np.zeros((4, ACT_DIM - 1)))


def test_step_after_done_rejected():
    env = ThrowEnv(seed=0)
    env.reset()
    env.step(np.full(ACT_DIM, np.nan))
    with pytest.raises(InvalidArgumentError):
        env.step(hold())


def test_nan_action_faults_episode():
    env = ThrowEnv(seed=0)
    env.reset()
    env.step(hold(1.5))
    a = hold()
    a[3] = np.nan
    _, rew, done, info = env.step(a)
    assert done and info.fault and info.stability == 0.0
    assert np.isfinite(rew)


@pytest.mark.parametrize("it, beta", [(0, 0.0), (50, 0.5), (100, 1.0), (400, 1.0), (-3, 0.0)])
def test_fade_factor(it, beta):
    assert fade_factor(it, 100) == beta


def test_privileged_channel_at_start_and_midway():
    env = VecThrowEnv(64, seeds=7)
    env.reset()
    env.set_estimate_stats(2.0, 0.5)
    obs = env.observe(0)
    assert np.array_equal(obs[:, 23], env.true_estimate)
    obs = env.observe(50)
    surrogate = (obs[:, 23] - 0.5 * env.true_estimate) / 0.5
    half = np.sqrt(3.0) * 0.5
    assert np.all(np.abs(surrogate - 2.0) <= half + 1e-12)


def test_privileged_channel_independent_after_fade():
    env = VecThrowEnv(10_000, seeds=8)
    env.reset()
    env.set_estimate_stats(float(env.true_estimate.mean()), float(env.true_estimate.std()))
    obs = env.observe(100)
    rho = np.corrcoef(obs[:, 23], env.true_estimate)[0, 1]
    assert abs(rho) < 0.05
    assert np.std(env.true_estimate) > 0.1
    # matched first two moments
    assert obs[:, 23].mean() == pytest.approx(env.true_estimate.mean(), abs=0.05)
    assert obs[:, 23].std() == pytest.approx(env.true_estimate.std(), rel=0.05)


def test_disabled_channels_read_zero():
    cfg = EnvConfig(observe_estimate=False, observe_released=False)
    env = ThrowEnv(env_cfg=cfg, seed=0)
    env.reset()
    for _ in range(8):
        obs, *_ = env.step(hold(1.5))
    assert env.vec.latched[0]
    assert obs[22] == 0.0 and obs[23] == 0.0


def test_arm_only_holds_body_joints():
    env = VecThrowEnv(8, env_cfg=EnvConfig(arm_only=True), seeds=9)
    env.reset()
    body = env.state.q[:, :2].copy()
    rng = np.random.default_rng(7)
    for _ in range(20):
        env.step(rng.uniform(-1, 1, (8, ACT_DIM)) * [1, 1, 1, 1, 1, 0])
    assert np.array_equal(env.state.q[:, :2], body)


def test_zero_body_scale_ignores_body_actions():
    cur = replace(CurriculumState.initial("humanoid", "general"), body_action_scale=0.0)
    runs = []
    for body in (0.0, 1.0):
        env = ThrowEnv(curriculum=cur, seed=1)
        env.reset()
        for _ in range(15):
            a = hold(a2=0.4)
            a[:2] = body
            env.step(a)
        runs.append(env.vec.state.q[0].copy())
    assert np.array_equal(runs[0], runs[1])


def test_observation_layout_same_for_arm_only():
    a = VecThrowEnv(2, env_cfg=EnvConfig(arm_only=True)).reset()
    b = VecThrowEnv(2).reset()
    assert a.shape == b.shape == (2, OBS_DIM)


def test_auto_reset_restarts_done_envs():
    env = VecThrowEnv(2, seeds=3)
    env.reset()
    a = np.zeros((2, ACT_DIM))
    a[0, 3] = np.nan
    obs, _, done, info = env.step(a)
    assert done.tolist() == [True, False]
    assert env.steps.tolist() == [0, 1]
    assert obs[0, 22] == 0.0 and info["episode"]["fault"][0]


def test_env_config_validation():
    with pytest.raises(InvalidArgumentError):
        EnvConfig(release_delay=-0.1)
    with pytest.raises(InvalidArgumentError):
        EnvConfig(detach_threshold=0.0)
    cfg = EnvConfig(arm_only=True)
    assert EnvConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    assert cfg.release_delay_steps == 5


def test_trace_writer(tmp_path):
    path = tmp_path / "trace.jsonl"
    env = VecThrowEnv(2, seeds=0)
    obs = env.reset()
    with TraceWriter(path) as tw:
        for k in range(3):
            a = np.zeros((2, ACT_DIM))
            nobs, r, d, _ = env.step(a)
            tw.write(k, obs, a, r, d)
            obs = nobs
    recs = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(recs) == 6
    assert set(recs[0]) == {"step", "env", "obs", "action", "reward", "done"}
    assert len(recs[0]["obs"]) == OBS_DIM


def test_quadruped_plant_runs():
    env = VecThrowEnv(4, plant_cfg=PlantConfig.quadruped(), reward_cfg=RewardConfig.quadruped(),
                      curriculum=CurriculumState.initial("quadruped", "distance"), seeds=0)
    obs = env.reset()
    assert np.all(obs[:, 5] == 14.0)
    _, r, _, _ = env.step(np.zeros((4, ACT_DIM)))
    assert np.all(np.isfinite(r))
