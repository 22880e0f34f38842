"""Run configuration: one JSON document holding every module's settings."""
from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from typing import List, Optional

from ballista.curriculum import DEFAULT_MAX_DIST, CurriculumState, Thresholds
from ballista.env import EnvConfig
from ballista.errors import InvalidArgumentError
from ballista.learner import PPOConfig
from ballista.plant import PlantConfig
from ballista.task import RewardConfig

PROFILES = ("humanoid", "quadruped")
TASKS = ("distance", "general")
MODES = ("arm_only", "full_body")


def default_sections(profile: str, task: str, mode: str) -> dict:
    plant = PlantConfig.humanoid() if profile == "humanoid" else PlantConfig.quadruped()
    humanoid = profile == "humanoid"
    reward = RewardConfig.humanoid_reduced() if humanoid else RewardConfig.quadruped()
    # short fixed waits keep humanoid episodes dense in throws; the quadruped wait is ramped
    env = EnvConfig(arm_only=(mode == "arm_only"), max_episode_steps=60 if humanoid else 200)
    return {
        "plant": plant.to_dict(),
        "reward": reward.to_dict(),
        "env": env.to_dict(),
        "ppo": PPOConfig().to_dict(),
        "curriculum": {
            "max_dist": DEFAULT_MAX_DIST[(profile, task)],
            "accuracy_threshold": Thresholds().accuracy_threshold,
            "stability_threshold": Thresholds().stability_threshold,
            "stability_wait": 0.5 if humanoid else 2.0,
            "final_ramp_iters": 100,
        },
        "eval": {"episodes": 512, "polar_phi_bins": 12, "polar_theta_bins": 5,
                 "distance_bins": 8},
        "tuner": {"budget": 100, "workers": 1, "quantile": 0.25, "n_candidates": 24,
                  "n_startup": 10, "iterations": 150, "env_count": 64,
                  "eval_episodes": 128, "synthetic": False},
    }


def _merge(base: dict, override: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in out:
            raise InvalidArgumentError(f"unknown config key {where}{key}")
        if isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _merge(out[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


@dataclass
class RunConfig:
    robot_profile: str = "humanoid"
    task: str = "general"
    mode: str = "full_body"
    seeds: List[int] = field(default_factory=lambda: [0])
    iterations: int = 1500
    env_count: int = 256
    checkpoint_every: int = 100
    out_dir: str = "runs/default"
    sections: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.robot_profile not in PROFILES:
            raise InvalidArgumentError(f"robot_profile must be one of {PROFILES}")
        if self.task not in TASKS:
            raise InvalidArgumentError(f"task must be one of {TASKS}")
        if self.mode not in MODES:
            raise InvalidArgumentError(f"mode must be one of {MODES}")
        if int(self.iterations) < 1:
            raise InvalidArgumentError("iterations must be >= 1")
        if int(self.env_count) < 1:
            raise InvalidArgumentError("env_count must be >= 1")
        if not self.seeds:
            raise InvalidArgumentError("seeds must not be empty")
        self.iterations, self.env_count = int(self.iterations), int(self.env_count)
        self.seeds = [int(s) for s in self.seeds]
        defaults = default_sections(self.robot_profile, self.task, self.mode)
        # JSON-normalised (tuples become lists) so a saved config reloads equal
        self.sections = json.loads(json.dumps(_merge(defaults, self.sections or {}, "")))
        # the mode flag is authoritative for the action mask
        self.sections["env"]["arm_only"] = self.mode == "arm_only"
        self.ppo_config()  # validate early

    # ---------------------------------------------------------- typed views
    def plant_config(self) -> PlantConfig:
        return PlantConfig.from_dict(self.sections["plant"])

    def reward_config(self) -> RewardConfig:
        return RewardConfig(**self.sections["reward"])

    def env_config(self) -> EnvConfig:
        return EnvConfig.from_dict(self.sections["env"])

    def ppo_config(self) -> PPOConfig:
        ppo = PPOConfig.from_dict(self.sections["ppo"])
        if self.env_count * ppo.steps_per_env < ppo.minibatches:
            raise InvalidArgumentError("batch smaller than the minibatch count")
        return ppo

    def curriculum(self) -> CurriculumState:
        c = self.sections["curriculum"]
        return CurriculumState.initial(
            self.robot_profile, self.task, c["max_dist"],
            Thresholds(c["accuracy_threshold"], c["stability_threshold"]),
            c["stability_wait"], c["final_ramp_iters"])

    # ---------------------------------------------------------- persistence
    def to_dict(self) -> dict:
        return {"robot_profile": self.robot_profile, "task": self.task, "mode": self.mode,
                "seeds": list(self.seeds), "iterations": self.iterations,
                "env_count": self.env_count, "checkpoint_every": self.checkpoint_every,
                "out_dir": self.out_dir, **copy.deepcopy(self.sections)}

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        top = {k: data.pop(k) for k in ("robot_profile", "task", "mode", "seeds", "iterations",
                                         "env_count", "checkpoint_every", "out_dir")
               if k in data}
        return cls(**top, sections=data)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=False)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidArgumentError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise InvalidArgumentError("config root must be an object")
        return cls.from_dict(data)

    def with_overrides(self, **kwargs) -> "RunConfig":
        """Copy with top-level fields replaced; ``None`` values are ignored.

        Changing profile, task or mode re-derives the untouched sections.
        """
        data = self.to_dict()
        for k, v in kwargs.items():
            if v is not None:
                data[k] = v
        if any(kwargs.get(k) is not None for k in ("robot_profile", "task", "mode")):
            fresh = default_sections(data["robot_profile"], data["task"], data["mode"])
            old = default_sections(self.robot_profile, self.task, self.mode)
            for name in fresh:
                if data[name] == old[name]:
                    data[name] = fresh[name]
        return RunConfig.from_dict(data)

    def ensure_out_dir(self, path: Optional[str] = None) -> str:
        path = path or self.out_dir
        try:
            os.makedirs(path, exist_ok=True)
        except OSError as exc:
            raise InvalidArgumentError(f"cannot create output directory {path}: {exc}") from exc
        return path
