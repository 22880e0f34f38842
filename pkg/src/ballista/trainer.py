"""Training loop: rollout, advantage estimation, policy update, curriculum, privileged fade."""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import torch

from ballista import curriculum as cur
from ballista import kernels
from ballista.config import RunConfig
from ballista.env import ACT_DIM, OBS_DIM, TraceWriter, VecThrowEnv, fade_factor
from ballista.errors import NumericalFault
from ballista.learner import (ActorCritic, collect, compute_gae, make_optimizer,
                              save_checkpoint, update)

CURVE_COLUMNS = ("iteration", "mean_reward", "accuracy", "stability_rate", "kl", "lr", "level",
                 "episodes", "fade", "privileged_corr")


def observation_scale(max_dist: float) -> np.ndarray:
    """Fixed per-channel divisors bringing every observation to roughly unit range."""
    d = max(max_dist / 2.0, 1.0)
    return np.array([1.0] * 3 + [1.0, math.pi, d] + [1.0] * 5 + [10.0] * 5 + [1.0] * 6
                    + [1.0, d])


def merge_episodes(episodes: List[dict]) -> Optional[dict]:
    if not episodes:
        return None
    return {k: np.concatenate([e[k] for e in episodes]) for k in episodes[0]}


def episode_metrics(merged: Optional[dict]) -> Optional[cur.IterationMetrics]:
    if merged is None or merged["env"].size == 0:
        return None
    return cur.IterationMetrics(float(np.mean(merged["throwing_reward"])),
                                float(np.mean(merged["stability"])))


def _corr(a: np.ndarray, b: np.ndarray) -> float:
    ok = np.isfinite(a) & np.isfinite(b)
    a, b = a[ok], b[ok]
    if a.size < 3 or a.std() == 0 or b.std() == 0:
        return float("nan")
    return float(np.corrcoef(a, b)[0, 1])


@dataclass
class TrainResult:
    out_dir: str
    checkpoint: str
    iterations: int
    curriculum: cur.CurriculumState
    estimate_stats: tuple
    curves: List[dict] = field(default_factory=list)


def checkpoint_meta(cfg: RunConfig, seed: int, iteration: int, state: cur.CurriculumState,
                    estimate_stats) -> dict:
    return {"config": cfg.to_dict(), "seed": seed, "iteration": iteration,
            "curriculum": state.to_dict(), "estimate_mean": estimate_stats[0],
            "estimate_std": estimate_stats[1]}


def write_checkpoint(path: str, policy: ActorCritic, meta: dict) -> None:
    save_checkpoint(path, policy)
    with open(path + ".json", "w") as fh:
        json.dump(meta, fh, indent=2)


class Trainer:
    def __init__(self, cfg: RunConfig, seed: Optional[int] = None, out_dir: Optional[str] = None,
                 trace_path: Optional[str] = None, log=None):
        self.cfg = cfg
        self.seed = cfg.seeds[0] if seed is None else int(seed)
        self.out_dir = cfg.ensure_out_dir(out_dir)
        self.ppo = cfg.ppo_config()
        self.log = log
        torch.set_num_threads(kernels.thread_count())
        torch.manual_seed(self.seed)
        self.generator = torch.Generator().manual_seed(self.seed)
        self.state = cfg.curriculum()
        self.env = VecThrowEnv(cfg.env_count, cfg.plant_config(), cfg.reward_config(),
                               cfg.env_config(), self.state, seeds=self.seed)
        self.policy = ActorCritic(OBS_DIM, ACT_DIM, self.ppo.hidden, self.ppo.init_std,
                                  observation_scale(self.state.max_dist))
        self.optimizer = make_optimizer(self.policy, self.ppo)
        self.trace_path = trace_path

    def _checkpoint(self, name: str, iteration: int) -> str:
        path = os.path.join(self.out_dir, name)
        write_checkpoint(path, self.policy, checkpoint_meta(
            self.cfg, self.seed, iteration, self.state,
            (self.env.estimate_mean, self.env.estimate_std)))
        return path

    def run(self) -> TrainResult:
        cfg, ppo, env = self.cfg, self.ppo, self.env
        total = cfg.iterations
        curve_path = os.path.join(self.out_dir, "curves.csv")
        clog_path = os.path.join(self.out_dir, "curriculum.csv")
        if os.path.exists(clog_path):
            os.remove(clog_path)
        clog = cur.CurriculumLog(clog_path)
        trace = TraceWriter(self.trace_path) if self.trace_path else None
        rows = []
        env.reset(self.state)
        est = env.true_estimate[np.isfinite(env.true_estimate)]
        env.set_estimate_stats(est.mean() if est.size else 0.0, est.std() if est.size else 0.0)
        with open(curve_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CURVE_COLUMNS)
            for it in range(total):
                obs = env.observe(it)
                on_step = None
                if trace is not None:
                    on_step = lambda t, o, a, r, d, base=it * ppo.steps_per_env: \
                        trace.write(base + t, o, a, r, d)
                try:
                    buf, obs, episodes, estimates = collect(self.policy, env, ppo.steps_per_env,
                                                            obs, self.generator, on_step=on_step)
                    buf.advantages, buf.returns = compute_gae(
                        buf.rewards, buf.values, buf.dones, buf.last_values, ppo.gamma,
                        ppo.gae_lambda)
                    stats = update(self.policy, self.optimizer, buf, ppo, self.generator)
                except NumericalFault:
                    self._checkpoint("abort.bin", it)
                    if trace is not None:
                        trace.close()
                    raise

                # privileged channel vs the estimate it was blended from
                n = env.num_envs
                est_steps = estimates.reshape(ppo.steps_per_env, n)
                corr = _corr(buf.obs[1:, :, 23].ravel(), est_steps[:-1].ravel())
                finite = estimates[np.isfinite(estimates)]
                if finite.size:
                    env.set_estimate_stats(finite.mean(), finite.std())

                merged = merge_episodes(episodes)
                metrics = episode_metrics(merged)
                mean_reward = float(np.mean(merged["return"])) if merged is not None else float("nan")
                level_used = self.state.level
                self.state = cur.update(self.state, metrics)
                self.state = cur.final_distance_ramp(self.state, total - it)
                env.set_curriculum(self.state)
                clog.append(self.state, metrics)

                row = {
                    "iteration": it,
                    "mean_reward": mean_reward,
                    "accuracy": metrics.mean_accuracy if metrics else float("nan"),
                    "stability_rate": metrics.stability_rate if metrics else float("nan"),
                    "kl": stats["kl"], "lr": stats["lr"], "level": level_used,
                    "episodes": 0 if merged is None else int(merged["env"].size),
                    "fade": fade_factor(it, env.cfg.privileged_fade_iters),
                    "privileged_corr": corr,
                }
                rows.append(row)
                writer.writerow([_fmt(row[c]) for c in CURVE_COLUMNS])
                fh.flush()
                if self.log is not None:
                    self.log(row)
                if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0 and it + 1 < total:
                    self._checkpoint(f"checkpoint_{it + 1:05d}.bin", it + 1)
        if trace is not None:
            trace.close()
        final = self._checkpoint("policy.bin", total)
        return TrainResult(self.out_dir, final, total, self.state,
                           (env.estimate_mean, env.estimate_std), rows)


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.9g}"


def train(cfg: RunConfig, seed: Optional[int] = None, out_dir: Optional[str] = None,
          trace_path: Optional[str] = None, log=None) -> TrainResult:
    return Trainer(cfg, seed, out_dir, trace_path, log).run()


def read_curves(path: str) -> List[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]
