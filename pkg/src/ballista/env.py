"""Throwing MDP over a batch of independent reduced throwers.

Timing rules (control at 50 Hz, physics at 200 Hz):

* a release scalar above 1 latches the release; the ball leaves the hand
  ``release_delay`` later with the hand's position and velocity;
* the throwing reward is paid once, at the first control step where the free
  ball is ``detach_threshold`` away from the hand, from a ballistic prediction
  of the remaining flight;
* ``post_release_zero_delay`` after detach the joint commands are replaced by
  the default pose;
* the episode ends ``stability_wait`` after detach, on a fall, on a numerical
  fault, or at ``max_episode_steps``; the stability bonus is added then.

Each environment owns its own random generator, so a batch is a set of
independent episodes: permuting the seeds permutes every output the same way.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from typing import Optional, Sequence

import numpy as np

from ballista import plant as plant_mod
from ballista.ballistics import BallisticModel, displacement_error_batch, vacuum_ground_time
from ballista.curriculum import CurriculumState, task_mode
from ballista.errors import InvalidArgumentError
from ballista.plant import N_JOINTS, PlantConfig, PlantState
from ballista.task import (EpisodeSummary, RewardConfig, roll_penalty, sample_target,
                           spherical_to_cartesian, throwing_reward)

OBS_DIM = 24
ACT_DIM = 6
OBS_LAYOUT = {
    "base_lin_vel": slice(0, 3),
    "command": slice(3, 6),
    "joint_pos": slice(6, 11),
    "joint_vel": slice(11, 16),
    "prev_action": slice(16, 22),
    "ball_released": slice(22, 23),
    "est_displacement": slice(23, 24),
}
# per-step uniform noise columns: lin vel (3), joint pos (5), joint vel (5), privileged channel (1)
_NOISE_COLS = 14


@dataclass(frozen=True)
class EnvConfig:
    control_hz: float = 50.0
    decimation: int = 4
    release_delay: float = 0.1
    post_release_zero_delay: float = 0.25
    detach_threshold: float = 0.25
    release_threshold: float = 1.0
    max_episode_steps: int = 200
    privileged_fade_iters: int = 100
    action_scale: tuple = (1.5, 0.15, 1.0, 2.0, 1.5)
    arm_only: bool = False
    estimate_dt: float = 1e-3
    ball_drag: Optional[float] = None
    # inputs that a sweep may switch off; a disabled channel reads zero
    observe_estimate: bool = True
    observe_released: bool = True

    def __post_init__(self):
        if self.release_delay < 0 or self.post_release_zero_delay < 0:
            raise InvalidArgumentError("delays must be non-negative")
        if not self.detach_threshold > 0:
            raise InvalidArgumentError("detach_threshold must be positive")
        if self.decimation < 1 or self.max_episode_steps < 1:
            raise InvalidArgumentError("decimation and max_episode_steps must be >= 1")
        if len(self.action_scale) != N_JOINTS:
            raise InvalidArgumentError("action_scale needs one entry per joint")
        object.__setattr__(self, "action_scale", tuple(float(a) for a in self.action_scale))

    @property
    def control_dt(self) -> float:
        return 1.0 / self.control_hz

    @property
    def release_delay_steps(self) -> int:
        return int(round(self.release_delay / self.control_dt))

    @property
    def zero_delay_steps(self) -> int:
        return int(math.ceil(self.post_release_zero_delay / self.control_dt - 1e-9))

    @property
    def ball_model(self) -> BallisticModel:
        return BallisticModel(self.ball_drag)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EnvConfig":
        data = dict(data)
        if "action_scale" in data:
            data["action_scale"] = tuple(data["action_scale"])
        return cls(**data)


def fade_factor(iteration: int, fade_iters: int) -> float:
    """Blend weight of noise in the privileged channel: 0 at iteration 0, 1 from ``fade_iters``."""
    if fade_iters <= 0:
        return 1.0
    return float(min(max(iteration / fade_iters, 0.0), 1.0))


def _seed_sequences(seed, n):
    if isinstance(seed, (list, tuple, np.ndarray)):
        if len(seed) != n:
            raise InvalidArgumentError("need one seed per environment")
        return [np.random.SeedSequence(int(s)) for s in seed]
    return np.random.SeedSequence(seed).spawn(n)


class VecThrowEnv:
    """``num_envs`` independent throwing episodes stepped in lockstep.

    ``seeds`` is either one integer (spawned into per-env streams) or a
    sequence with one integer per environment.
    """

    def __init__(self, num_envs: int, plant_cfg: Optional[PlantConfig] = None,
                 reward_cfg: Optional[RewardConfig] = None, env_cfg: Optional[EnvConfig] = None,
                 curriculum: Optional[CurriculumState] = None, seeds=0, auto_reset: bool = True):
        if num_envs < 1:
            raise InvalidArgumentError("num_envs must be >= 1")
        self.num_envs = n = int(num_envs)
        self.plant_cfg = plant_cfg or PlantConfig.humanoid()
        self.reward_cfg = reward_cfg or RewardConfig.humanoid()
        self.cfg = env_cfg or EnvConfig()
        self.curriculum = curriculum or CurriculumState.initial()
        self.auto_reset = auto_reset
        self.iteration = 0
        self.estimate_mean = 2.0
        self.estimate_std = 1.0
        self._locked = np.array([1, 1, 0, 0, 0] if self.cfg.arm_only else [0] * 5, dtype=np.uint8)
        self._action_scale = np.array(self.cfg.action_scale)
        self._seed_all(seeds)

        self.state = PlantState.default(self.plant_cfg, n)
        self.command = np.zeros((n, 3))
        self.target = np.zeros((n, 3))
        self.prev_action = np.zeros((n, ACT_DIM))
        self.steps = np.zeros(n, dtype=np.int64)
        self.latched = np.zeros(n, dtype=bool)
        self.latch_step = np.full(n, -1, dtype=np.int64)
        self.detached = np.zeros(n, dtype=bool)
        self.detach_step = np.full(n, -1, dtype=np.int64)
        self.emitted = np.zeros(n, dtype=bool)
        self.E = np.full(n, np.nan)
        self.throw_r = np.zeros(n)
        self.release_pos = np.zeros((n, 3))
        self.release_vel = np.zeros((n, 3))
        self.hmin = np.zeros(n)
        self.hmax = np.zeros(n)
        self.max_tilt = np.zeros(n)
        self.fell = np.zeros(n, dtype=bool)
        self.fault = np.zeros(n, dtype=bool)
        self.ep_throw = np.zeros(n)
        self.ep_stab = np.zeros(n)
        self.ep_roll = np.zeros(n)
        self.ep_return = np.zeros(n)
        self.noise = np.zeros((n, self.cfg.max_episode_steps + 1, _NOISE_COLS))
        self.wait_steps = np.zeros(n, dtype=np.int64)
        self.body_scale = np.ones(n)
        self.true_estimate = np.zeros(n)
        self.done = np.zeros(n, dtype=bool)
        self._estimate_buf = np.empty(n)

    # -------------------------------------------------------------- setup

    def _seed_all(self, seeds):
        self.rngs = [np.random.default_rng(ss) for ss in _seed_sequences(seeds, self.num_envs)]

    def set_curriculum(self, curriculum: CurriculumState) -> None:
        """Install a curriculum snapshot; it applies from each env's next reset."""
        self.curriculum = curriculum

    def set_estimate_stats(self, mean: float, std: float) -> None:
        """Statistics of recent true displacement estimates, used for the faded channel."""
        self.estimate_mean = float(mean)
        self.estimate_std = float(max(std, 0.0))

    def reset(self, curriculum: Optional[CurriculumState] = None, seeds=None) -> np.ndarray:
        """Reset every environment; returns observations (n, 24)."""
        if curriculum is not None:
            self.curriculum = curriculum
        if seeds is not None:
            self._seed_all(seeds)
        self._reset_idx(np.arange(self.num_envs))
        return self.observe()

    def _reset_idx(self, idx: np.ndarray) -> None:
        if idx.size == 0:
            return
        cfg = self.plant_cfg
        mode = task_mode(self.curriculum)
        wait = int(round(self.curriculum.stability_wait / self.cfg.control_dt))
        randomize = cfg.randomization.enabled
        for i in idx:
            rng = self.rngs[i]
            cmd = sample_target(mode, rng)
            offsets, mass = plant_mod.sample_randomization(cfg, rng)
            noise = rng.uniform(-1.0, 1.0, (self.cfg.max_episode_steps + 1, _NOISE_COLS))
            self.command[i] = (cmd.theta_tilde, cmd.phi, cmd.r)
            self.state.q[i] = np.clip(cfg.default + offsets, cfg.lower, cfg.upper)
            self.state.body_mass[i] = mass
            if not randomize:
                # the privileged-channel column is still needed without sensor noise
                noise[:, :-1] = 0.0
            self.noise[i] = noise
        self.target[idx] = spherical_to_cartesian(self.command[idx, 0], self.command[idx, 1],
                                                  self.command[idx, 2])
        st = self.state
        st.qd[idx] = 0.0
        st.alpha[idx] = 0.0
        st.alphad[idx] = 0.0
        st.fault[idx] = 0
        st.ball_attached[idx] = True
        plant_mod.attach_ball(st, cfg)
        h = st.base_height[idx]
        st.height_min[idx] = h
        st.height_max[idx] = h
        self.hmin[idx] = h
        self.hmax[idx] = h
        self.prev_action[idx] = 0.0
        self.steps[idx] = 0
        self.latched[idx] = False
        self.latch_step[idx] = -1
        self.detached[idx] = False
        self.detach_step[idx] = -1
        self.emitted[idx] = False
        self.E[idx] = np.nan
        self.throw_r[idx] = 0.0
        self.release_pos[idx] = 0.0
        self.release_vel[idx] = 0.0
        self.max_tilt[idx] = 0.0
        self.fell[idx] = False
        self.fault[idx] = False
        self.ep_throw[idx] = 0.0
        self.ep_stab[idx] = 0.0
        self.ep_roll[idx] = 0.0
        self.ep_return[idx] = 0.0
        self.wait_steps[idx] = wait
        self.body_scale[idx] = self.curriculum.body_action_scale
        self.done[idx] = False

    # -------------------------------------------------------------- observation

    def _estimate(self) -> np.ndarray:
        pos, vel = plant_mod.end_effector_state(self.state, self.plant_cfg)
        return displacement_error_batch(pos, vel, self.target, self.cfg.ball_model,
                                        self.cfg.estimate_dt, out=self._estimate_buf)

    def observe(self, training_iteration: Optional[int] = None) -> np.ndarray:
        """Current observations (n, 24).

        The last channel is the displacement the robot would get if the ball left
        the hand now, blended toward distribution-matched noise as training
        progresses.
        """
        if training_iteration is not None:
            self.iteration = int(training_iteration)
        n = self.num_envs
        st = self.state
        cfg = self.plant_cfg
        rz = cfg.randomization
        k = np.minimum(self.steps, self.cfg.max_episode_steps)
        noise = self.noise[np.arange(n), k]
        obs = np.empty((n, OBS_DIM))
        ca, sa = np.cos(st.alpha), np.sin(st.alpha)
        h, hd = st.q[:, 1], st.qd[:, 1]
        obs[:, 0] = 0.0
        obs[:, 1] = -hd * sa - h * ca * st.alphad
        obs[:, 2] = hd * ca - h * sa * st.alphad
        obs[:, 0:3] += rz.lin_vel_noise * noise[:, 0:3]
        obs[:, 3] = self.command[:, 0]
        # azimuth wrapped to (-pi, pi] so straight ahead is not a discontinuity
        obs[:, 4] = np.mod(self.command[:, 1] + math.pi, 2.0 * math.pi) - math.pi
        obs[:, 5] = self.command[:, 2]
        obs[:, 6:11] = st.q - cfg.default + rz.joint_pos_noise * noise[:, 3:8]
        obs[:, 11:16] = st.qd + rz.joint_vel_noise * noise[:, 8:13]
        obs[:, 16:22] = self.prev_action
        obs[:, 22] = self.latched
        true_est = self._estimate()
        self.true_estimate[:] = true_est
        beta = fade_factor(self.iteration, self.cfg.privileged_fade_iters)
        half = math.sqrt(3.0) * self.estimate_std
        surrogate = self.estimate_mean + half * noise[:, 13]
        obs[:, 23] = (1.0 - beta) * true_est + beta * surrogate
        if not self.cfg.observe_released:
            obs[:, 22] = 0.0
        if not self.cfg.observe_estimate:
            obs[:, 23] = 0.0
        return obs

    # -------------------------------------------------------------- dynamics

    def step(self, actions: np.ndarray):
        """Advance every environment one control step.

        Returns ``(obs, reward, done, info)``. ``info["episode"]`` holds per-env
        arrays describing the episodes that ended on this step (rows where
        ``done`` is set); with auto-reset on, ``obs`` for those rows is already
        the first observation of the next episode.
        """
        actions = np.asarray(actions, dtype=float)
        if actions.shape != (self.num_envs, ACT_DIM):
            raise InvalidArgumentError(
                f"actions must have shape ({self.num_envs}, {ACT_DIM}), got {actions.shape}")
        if self.done.any():
            raise InvalidArgumentError("step() on a finished episode; call reset() first")
        cfg = self.cfg
        pc = self.plant_cfg
        rc = self.reward_cfg
        st = self.state

        bad = ~np.all(np.isfinite(actions), axis=1)
        act = np.where(bad[:, None], 0.0, actions)
        self.fault |= bad

        new_latch = ~self.latched & (act[:, 5] > cfg.release_threshold) & ~bad
        self.latched |= new_latch
        self.latch_step[new_latch] = self.steps[new_latch]

        offsets = act[:, :N_JOINTS] * self._action_scale
        offsets[:, :2] *= self.body_scale[:, None]
        zeroed = self.detached & (self.steps >= self.detach_step + cfg.zero_delay_steps)
        offsets[zeroed] = 0.0
        targets = np.clip(pc.default + offsets, pc.lower, pc.upper)
        if cfg.arm_only:
            targets[:, :2] = st.q[:, :2]

        plant_mod.step_inplace(st, targets, pc, cfg.decimation, self._locked, cfg.ball_model)
        self.steps += 1
        self.prev_action[:] = act
        self.fault |= st.fault.astype(bool)

        detach_now = (self.latched & ~self.detached
                      & (self.steps - self.latch_step >= cfg.release_delay_steps))
        if detach_now.any():
            self.detached |= detach_now
            self.detach_step[detach_now] = self.steps[detach_now]
            st.ball_attached[detach_now] = False
            self.release_pos[detach_now] = st.ball_pos[detach_now]
            self.release_vel[detach_now] = st.ball_vel[detach_now]

        hand, _ = plant_mod.end_effector_state(st, pc)
        sep = np.linalg.norm(st.ball_pos - hand, axis=1)
        emit = self.detached & ~self.emitted & (sep >= rc.detach_threshold)

        np.minimum(self.hmin, st.height_min, out=self.hmin)
        np.maximum(self.hmax, st.height_max, out=self.hmax)
        tilt = np.abs(st.alpha)
        np.maximum(self.max_tilt, np.where(np.isfinite(tilt), tilt, np.inf), out=self.max_tilt)
        self.fell |= tilt > pc.fall_bound

        settled = self.detached & (self.steps - self.detach_step >= self.wait_steps)
        done = (self.fell | self.fault | (settled & (self.emitted | emit))
                | (self.steps >= cfg.max_episode_steps))
        # a thrown ball is always scored before the episode closes
        emit |= done & self.detached & ~self.emitted

        reward = np.zeros(self.num_envs)
        if emit.any():
            self._emit(emit)
            reward[emit] += rc.lambda1 * self.throw_r[emit]
            self.ep_throw[emit] += rc.lambda1 * self.throw_r[emit]

        roll = roll_penalty(np.where(np.isfinite(st.alpha), st.alpha, math.pi), rc)
        reward += rc.lambda3 * roll
        self.ep_roll += rc.lambda3 * roll

        info = {"episode": None, "true_estimate": None}
        if done.any():
            idx = np.flatnonzero(done)
            summary = self._summaries(idx)
            stab = summary["stability"]
            reward[idx] += rc.lambda2 * stab
            self.ep_stab[idx] += rc.lambda2 * stab
            self.ep_return += reward
            summary["return"] = self.ep_return[idx].copy()
            summary["throw_term"] = self.ep_throw[idx].copy()
            summary["stability_term"] = self.ep_stab[idx].copy()
            summary["roll_term"] = self.ep_roll[idx].copy()
            info["episode"] = summary
        else:
            self.ep_return += reward
        info["done_idx"] = np.flatnonzero(done)

        if self.auto_reset:
            self._reset_idx(np.flatnonzero(done))
        else:
            self.done |= done
        obs = self.observe()
        info["true_estimate"] = self.true_estimate.copy()
        return obs, reward, done, info

    def _emit(self, mask: np.ndarray) -> None:
        st = self.state
        E = displacement_error_batch(st.ball_pos[mask], st.ball_vel[mask], self.target[mask],
                                     self.cfg.ball_model)
        self.E[mask] = E
        self.throw_r[mask] = throwing_reward(E, self.command[mask, 2])
        self.emitted |= mask

    def _summaries(self, idx: np.ndarray) -> dict:
        lo, hi = self.plant_cfg.safe_height
        released = self.detached[idx]
        fell = self.fell[idx]
        fault = self.fault[idx]
        stable = (released & ~fell & ~fault & (self.hmin[idx] >= lo) & (self.hmax[idx] <= hi))
        ranges = np.array([self._landing_range(i) for i in idx])
        return {
            "env": idx.copy(),
            "released": released.copy(),
            "detach_time": np.where(released, self.detach_step[idx] * self.cfg.control_dt, np.nan),
            "E": self.E[idx].copy(),
            "r": self.command[idx, 2].copy(),
            "command": self.command[idx].copy(),
            "target": self.target[idx].copy(),
            "min_base_height": self.hmin[idx].copy(),
            "max_base_height": self.hmax[idx].copy(),
            "max_abs_tilt": self.max_tilt[idx].copy(),
            "fell": fell.copy(),
            "fault": fault.copy(),
            "stability": stable.astype(float),
            "throwing_reward": np.where(released, self.throw_r[idx], 0.0),
            "landing_range": ranges,
            "length": self.steps[idx].copy(),
        }

    def _landing_range(self, i: int) -> float:
        if not self.detached[i]:
            return float("nan")
        p, v = self.release_pos[i], self.release_vel[i]
        g = self.cfg.ball_model.gravity
        if self.cfg.ball_model.is_vacuum:
            t = vacuum_ground_time(p[2], v[2], g)
            if t is None:
                return float(math.hypot(p[0], p[1]))
            return float(math.hypot(p[0] + v[0] * t, p[1] + v[1] * t))
        from ballista.ballistics import ReleaseState, landing_range
        return landing_range(ReleaseState(p, v), self.cfg.ball_model)

    def episode_summary(self, i: int) -> EpisodeSummary:
        """Running summary of env ``i``'s current episode."""
        lo, hi = self.plant_cfg.safe_height
        s = self._summaries(np.array([i]))
        return EpisodeSummary(
            released=bool(s["released"][0]), detach_time=float(s["detach_time"][0]),
            E=float(s["E"][0]), r=float(s["r"][0]), min_base_height=float(s["min_base_height"][0]),
            max_base_height=float(s["max_base_height"][0]),
            max_abs_tilt=float(s["max_abs_tilt"][0]), fell=bool(s["fell"][0]),
            fault=bool(s["fault"][0]), height_bounds=(lo, hi), stability=float(s["stability"][0]),
            throwing_reward=float(s["throwing_reward"][0]),
            landing_range=float(s["landing_range"][0]), length=int(s["length"][0]))


def batch_step(envs: VecThrowEnv, actions: np.ndarray):
    """Step every environment of ``envs``; finished episodes restart with fresh targets."""
    actions = np.asarray(actions, dtype=float)
    if actions.ndim != 2 or actions.shape[0] != envs.num_envs:
        raise InvalidArgumentError(
            f"action matrix needs {envs.num_envs} rows, got shape {actions.shape}")
    return envs.step(actions)


class ThrowEnv:
    """Single-episode view over a one-element :class:`VecThrowEnv` without auto-reset."""

    def __init__(self, plant_cfg: Optional[PlantConfig] = None,
                 reward_cfg: Optional[RewardConfig] = None, env_cfg: Optional[EnvConfig] = None,
                 curriculum: Optional[CurriculumState] = None, seed: int = 0):
        self.vec = VecThrowEnv(1, plant_cfg, reward_cfg, env_cfg, curriculum, seeds=[seed],
                               auto_reset=False)

    def reset(self, curriculum: Optional[CurriculumState] = None, seed: Optional[int] = None):
        return self.vec.reset(curriculum, None if seed is None else [seed])[0]

    def step(self, action):
        obs, rew, done, info = self.vec.step(np.asarray(action, dtype=float).reshape(1, ACT_DIM))
        summary = self.vec.episode_summary(0)
        if info["episode"] is not None:
            summary.stability = float(info["episode"]["stability"][0])
        return obs[0], float(rew[0]), bool(done[0]), summary

    def observe(self, training_iteration: Optional[int] = None):
        return self.vec.observe(training_iteration)[0]

    @property
    def done(self) -> bool:
        return bool(self.vec.done[0])


class TraceWriter:
    """Line-delimited JSON episode trace: one record per env per control step."""

    def __init__(self, path):
        self._fh = open(path, "w")

    def write(self, step: int, obs, action, reward, done) -> None:
        for i in range(len(reward)):
            self._fh.write(json.dumps({
                "step": int(step), "env": i,
                "obs": [round(float(x), 6) for x in obs[i]],
                "action": [round(float(x), 6) for x in action[i]],
                "reward": float(reward[i]), "done": bool(done[i]),
            }) + "\n")

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
