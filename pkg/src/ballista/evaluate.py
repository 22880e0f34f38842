"""Deterministic policy evaluation and the plot-ready report files."""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Union

import numpy as np
import torch

from ballista.config import RunConfig
from ballista.curriculum import MAX_WAIT, CurriculumState, task_range
from ballista.env import VecThrowEnv
from ballista.errors import InvalidArgumentError
from ballista.learner import ActorCritic

EPISODE_COLUMNS = ("episode", "theta_tilde", "phi", "r", "released", "E", "error", "norm_error",
                   "throwing_reward", "stability", "landing_range", "max_abs_tilt",
                   "min_base_height", "max_base_height", "fell", "length")
DISTANCE_COLUMNS = ("r_lo", "r_hi", "count", "mean_error", "std_error", "mean_norm_error",
                    "stability_rate")
POLAR_COLUMNS = ("phi_lo", "phi_hi", "theta_lo", "theta_hi", "count", "mean_error",
                 "mean_norm_error")

_EVAL_SEED_STRIDE = 1_000_003


def final_curriculum(cfg: RunConfig) -> CurriculumState:
    """Curriculum at full difficulty: level 1, full body actions, final stability wait."""
    state = cfg.curriculum()
    wait = MAX_WAIT if state.ramps_body else state.stability_wait
    return replace(state, level=1.0, body_action_scale=1.0, stability_wait=wait)


def policy_fn(policy: Union[ActorCritic, Callable]) -> Callable:
    if isinstance(policy, ActorCritic):
        def act(obs):
            a, _, _ = policy.act(obs, deterministic=True)
            return a.astype(np.float64)
        return act
    return policy


@dataclass
class EvalReport:
    episodes: dict
    summary: dict
    by_distance: list = field(default_factory=list)
    polar: list = field(default_factory=list)

    def write(self, out_dir: str) -> None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "episodes.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(EPISODE_COLUMNS)
            n = len(self.episodes["episode"])
            for i in range(n):
                w.writerow([_fmt(self.episodes[c][i]) for c in EPISODE_COLUMNS])
        _write_rows(os.path.join(out_dir, "error_by_distance.csv"), DISTANCE_COLUMNS,
                    self.by_distance)
        _write_rows(os.path.join(out_dir, "polar_grid.csv"), POLAR_COLUMNS, self.polar)
        with open(os.path.join(out_dir, "summary.json"), "w") as fh:
            json.dump(self.summary, fh, indent=2, default=_json_default)
            fh.write("\n")


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(type(obj))


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.9g}"


def _write_rows(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def _nan_stat(fn, values):
    values = np.asarray(values, dtype=float)
    return float(fn(values)) if values.size else float("nan")


def run_episodes(policy, cfg: RunConfig, n_episodes: int, seed: int = 0,
                 estimate_stats=(0.0, 0.0), fade_iteration: int = 10 ** 6,
                 batch: Optional[int] = None) -> dict:
    """Run ``n_episodes`` complete episodes at full difficulty and return per-episode arrays.

    Episode ``k`` always uses seed stream ``seed * stride + k``, so results do
    not depend on the batch size.
    """
    if n_episodes < 0:
        raise InvalidArgumentError("n_episodes must be non-negative")
    act = policy_fn(policy)
    state = final_curriculum(cfg)
    batch = max(1, min(batch or cfg.env_count, n_episodes or 1))
    collected = []
    for start in range(0, n_episodes, batch):
        ids = np.arange(start, min(start + batch, n_episodes))
        env = VecThrowEnv(ids.size, cfg.plant_config(), cfg.reward_config(), cfg.env_config(),
                          state, seeds=[seed * _EVAL_SEED_STRIDE + int(k) for k in ids])
        env.set_estimate_stats(*estimate_stats)
        obs = env.reset()
        obs = env.observe(fade_iteration)
        recorded = {}
        while len(recorded) < ids.size:
            obs, _, done, info = env.step(act(obs))
            if info["episode"] is None:
                continue
            ep = info["episode"]
            for j, e in enumerate(ep["env"]):
                if e not in recorded:
                    recorded[e] = {k: v[j] for k, v in ep.items()}
        for e in range(ids.size):
            rec = recorded[e]
            rec["episode"] = int(ids[e])
            collected.append(rec)
    return _episode_table(collected)


def _episode_table(records) -> dict:
    cols = {c: [] for c in EPISODE_COLUMNS}
    for rec in records:
        released = bool(rec["released"])
        r = float(rec["r"])
        E = float(rec["E"]) if released else float("nan")
        # an episode without a throw scores like a miss of the full target distance
        error = E if released else r
        cols["episode"].append(rec["episode"])
        cols["theta_tilde"].append(float(rec["command"][0]))
        cols["phi"].append(float(rec["command"][1]))
        cols["r"].append(r)
        cols["released"].append(released)
        cols["E"].append(E)
        cols["error"].append(error)
        cols["norm_error"].append(error / r)
        cols["throwing_reward"].append(float(rec["throwing_reward"]))
        cols["stability"].append(float(rec["stability"]))
        cols["landing_range"].append(float(rec["landing_range"]))
        cols["max_abs_tilt"].append(float(rec["max_abs_tilt"]))
        cols["min_base_height"].append(float(rec["min_base_height"]))
        cols["max_base_height"].append(float(rec["max_base_height"]))
        cols["fell"].append(bool(rec["fell"]))
        cols["length"].append(int(rec["length"]))
    return {k: np.asarray(v) for k, v in cols.items()}


def build_report(episodes: dict, cfg: RunConfig, extra: Optional[dict] = None) -> EvalReport:
    ev = cfg.sections["eval"]
    n = len(episodes["episode"])
    lo, hi = task_range(final_curriculum(cfg))
    err = episodes["error"]
    stab = episodes["stability"]
    stable = stab > 0.5
    ranges = episodes["landing_range"]
    stable_ranges = ranges[stable & np.isfinite(ranges)]
    summary = {
        "n_episodes": n,
        "mean_error": _nan_stat(np.mean, err),
        "std_error": _nan_stat(np.std, err),
        "mean_norm_error": _nan_stat(np.mean, episodes["norm_error"]),
        "accuracy": _nan_stat(np.mean, episodes["throwing_reward"]),
        "stability_rate": _nan_stat(np.mean, stab),
        "release_rate": _nan_stat(np.mean, episodes["released"].astype(float)),
        "stable_range": _nan_stat(np.mean, stable_ranges),
        "max_stable_range": _nan_stat(np.max, stable_ranges),
        "mean_range": _nan_stat(np.nanmean, ranges) if np.isfinite(ranges).any() else float("nan"),
        "target_range": [lo, hi],
        "config": cfg.to_dict(),
    }
    if extra:
        summary.update(extra)

    by_distance = []
    nb = 1 if hi - lo < 1e-9 else int(ev["distance_bins"])
    edges = np.linspace(lo, hi, nb + 1)
    for b in range(nb):
        upper = edges[b + 1] + (1e-9 if b == nb - 1 else 0.0)
        m = (episodes["r"] >= edges[b] - 1e-9) & (episodes["r"] < upper)
        by_distance.append({
            "r_lo": edges[b], "r_hi": edges[b + 1], "count": int(m.sum()),
            "mean_error": _nan_stat(np.mean, err[m]), "std_error": _nan_stat(np.std, err[m]),
            "mean_norm_error": _nan_stat(np.mean, episodes["norm_error"][m]),
            "stability_rate": _nan_stat(np.mean, stab[m]),
        })

    polar = []
    n_phi, n_theta = int(ev["polar_phi_bins"]), int(ev["polar_theta_bins"])
    phi_edges = np.linspace(0.0, 2.0 * math.pi, n_phi + 1)
    th_edges = np.linspace(0.0, 1.0, n_theta + 1)
    phi_idx = np.clip(np.searchsorted(phi_edges, episodes["phi"], side="right") - 1, 0, n_phi - 1)
    th_idx = np.clip(np.searchsorted(th_edges, episodes["theta_tilde"], side="right") - 1, 0,
                     n_theta - 1)
    for i in range(n_phi):
        for j in range(n_theta):
            m = (phi_idx == i) & (th_idx == j)
            polar.append({"phi_lo": phi_edges[i], "phi_hi": phi_edges[i + 1],
                          "theta_lo": th_edges[j], "theta_hi": th_edges[j + 1],
                          "count": int(m.sum()), "mean_error": _nan_stat(np.mean, err[m]),
                          "mean_norm_error": _nan_stat(np.mean, episodes["norm_error"][m])})
    return EvalReport(episodes, summary, by_distance, polar)


def evaluate(policy, cfg: RunConfig, n_episodes: int, seed: int = 0, estimate_stats=(0.0, 0.0),
             fade_iteration: int = 10 ** 6, extra: Optional[dict] = None) -> EvalReport:
    episodes = run_episodes(policy, cfg, n_episodes, seed, estimate_stats, fade_iteration)
    return build_report(episodes, cfg, extra)


def evaluate_checkpoint(path: str, n_episodes: int, seed: int = 0,
                        cfg: Optional[RunConfig] = None) -> EvalReport:
    """Evaluate a saved policy; the run config stored next to it is used unless one is given."""
    from ballista.env import ACT_DIM, OBS_DIM
    from ballista.learner import load_checkpoint
    meta_path = path + ".json"
    meta = {}
    if os.path.exists(meta_path):
        with open(meta_path) as fh:
            meta = json.load(fh)
    if cfg is None:
        if "config" not in meta:
            raise InvalidArgumentError(f"no config given and no metadata next to {path}")
        cfg = RunConfig.from_dict(meta["config"])
    policy = load_checkpoint(path, OBS_DIM, ACT_DIM)
    stats = (meta.get("estimate_mean", 0.0), meta.get("estimate_std", 0.0))
    return evaluate(policy, cfg, n_episodes, seed, stats, meta.get("iteration", 10 ** 6),
                    extra={"checkpoint": os.path.abspath(path)})


def polar_difference(grid_a: str, grid_b: str, out_path: str) -> list:
    """Cell-wise ``mean_error(a) - mean_error(b)`` for two polar grid files with matching bins."""
    def load(p):
        with open(p, newline="") as fh:
            return list(csv.DictReader(fh))
    a, b = load(grid_a), load(grid_b)
    if len(a) != len(b) or any((x["phi_lo"], x["theta_lo"]) != (y["phi_lo"], y["theta_lo"])
                               for x, y in zip(a, b)):
        raise InvalidArgumentError("polar grids have different binning")
    rows = []
    for x, y in zip(a, b):
        rows.append({"phi_lo": float(x["phi_lo"]), "phi_hi": float(x["phi_hi"]),
                     "theta_lo": float(x["theta_lo"]), "theta_hi": float(x["theta_hi"]),
                     "count_a": int(x["count"]), "count_b": int(y["count"]),
                     "error_difference": float(x["mean_error"]) - float(y["mean_error"])})
    cols = ("phi_lo", "phi_hi", "theta_lo", "theta_hi", "count_a", "count_b", "error_difference")
    _write_rows(out_path, cols, rows)
    return rows
