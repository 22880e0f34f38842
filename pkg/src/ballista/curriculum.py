"""Adaptive difficulty schedule.

One scalar ``level`` in [0, 1] maps to the commanded target-distance range.
It advances in 1% steps on iterations where both the mean throwing reward and
the stable-episode rate clear their thresholds, and is driven linearly to 1
over the last ``final_ramp_iters`` iterations if it has not got there. The
quadruped distance profile also ramps the body-action scale and the
post-release stability wait on the same trigger.
"""
from __future__ import annotations

import csv
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Tuple

from ballista.errors import InvalidArgumentError
from ballista.task import TaskMode

LEVEL_STEP = 0.01
BODY_SCALE_STEP = 0.02
WAIT_STEP = 0.02
MAX_WAIT = 2.0
_DIGITS = 12

DEFAULT_MAX_DIST = {
    ("humanoid", "distance"): 12.0,
    ("quadruped", "distance"): 14.0,
    ("humanoid", "general"): 5.0,
    ("quadruped", "general"): 8.0,
}


@dataclass(frozen=True)
class Thresholds:
    accuracy_threshold: float = 0.51
    stability_threshold: float = 0.22

    def __post_init__(self):
        for name in ("accuracy_threshold", "stability_threshold"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidArgumentError(f"{name} must lie in [0, 1]")


@dataclass(frozen=True)
class IterationMetrics:
    mean_accuracy: float
    stability_rate: float


@dataclass(frozen=True)
class CurriculumState:
    robot_profile: str = "humanoid"
    task: str = "general"
    max_dist: float = 5.0
    thresholds: Thresholds = field(default_factory=Thresholds)
    iteration: int = 0
    level: float = 0.0
    body_action_scale: float = 1.0
    stability_wait: float = 0.5
    final_ramp_iters: int = 100

    def __post_init__(self):
        if self.robot_profile not in ("humanoid", "quadruped"):
            raise InvalidArgumentError(f"unknown robot profile {self.robot_profile!r}")
        if self.task not in ("distance", "general"):
            raise InvalidArgumentError(f"unknown task {self.task!r}")
        if isinstance(self.thresholds, dict):
            object.__setattr__(self, "thresholds", Thresholds(**self.thresholds))

    @classmethod
    def initial(cls, robot_profile: str = "humanoid", task: str = "general",
                max_dist: Optional[float] = None, thresholds: Optional[Thresholds] = None,
                stability_wait: float = 0.5, final_ramp_iters: int = 100) -> "CurriculumState":
        """Starting state for a profile. The quadruped distance profile starts its
        body-action scale and stability wait at zero; everything else holds them fixed."""
        if max_dist is None:
            max_dist = DEFAULT_MAX_DIST[(robot_profile, task)]
        ramps = robot_profile == "quadruped" and task == "distance"
        return cls(robot_profile=robot_profile, task=task, max_dist=float(max_dist),
                   thresholds=thresholds or Thresholds(),
                   body_action_scale=0.0 if ramps else 1.0,
                   stability_wait=0.0 if ramps else stability_wait,
                   final_ramp_iters=final_ramp_iters)

    @property
    def ramps_body(self) -> bool:
        return self.robot_profile == "quadruped" and self.task == "distance"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "CurriculumState":
        return cls(**data)


def criteria_met(state: CurriculumState, metrics: IterationMetrics) -> bool:
    th = state.thresholds
    return (metrics.mean_accuracy >= th.accuracy_threshold
            and metrics.stability_rate >= th.stability_threshold)


def update(state: CurriculumState, metrics: Optional[IterationMetrics]) -> CurriculumState:
    """Advance one training iteration. ``metrics=None`` (no finished episodes) never advances."""
    if metrics is None or not criteria_met(state, metrics):
        return replace(state, iteration=state.iteration + 1)
    level = round(min(state.level + LEVEL_STEP, 1.0), _DIGITS)
    scale, wait = state.body_action_scale, state.stability_wait
    if state.ramps_body:
        scale = round(min(scale + BODY_SCALE_STEP, 1.0), _DIGITS)
        wait = round(min(wait + WAIT_STEP, MAX_WAIT), _DIGITS)
    return replace(state, iteration=state.iteration + 1, level=level,
                   body_action_scale=scale, stability_wait=wait)


def final_distance_ramp(state: CurriculumState, remaining_iters: int) -> CurriculumState:
    """Close the remaining gap to level 1 evenly over ``remaining_iters`` iterations
    (this one included). No-op outside the final window or once at level 1."""
    if state.level >= 1.0 or remaining_iters <= 0 or remaining_iters > state.final_ramp_iters:
        return state
    level = round(min(state.level + (1.0 - state.level) / remaining_iters, 1.0), _DIGITS)
    return replace(state, level=level)


def task_range(state: CurriculumState) -> Tuple[float, float]:
    if state.task == "general":
        return (1.0, 3.0 + state.level * (state.max_dist - 3.0))
    if state.robot_profile == "quadruped":
        return (state.max_dist, state.max_dist)
    d = 4.0 + state.level * (state.max_dist - 4.0)
    return (d, d)


def task_mode(state: CurriculumState) -> TaskMode:
    return TaskMode(state.task, task_range(state))


class CurriculumLog:
    """Append-only CSV trace of the schedule."""

    COLUMNS = ("iteration", "level", "body_action_scale", "stability_wait", "range_lo",
               "range_hi", "mean_accuracy", "stability_rate")

    def __init__(self, path):
        self.path = path
        if not os.path.exists(path):
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerow(self.COLUMNS)

    def append(self, state: CurriculumState, metrics: Optional[IterationMetrics]) -> None:
        lo, hi = task_range(state)
        acc = "" if metrics is None else f"{metrics.mean_accuracy:.6f}"
        stab = "" if metrics is None else f"{metrics.stability_rate:.6f}"
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([state.iteration, f"{state.level:.6f}",
                                     f"{state.body_action_scale:.4f}",
                                     f"{state.stability_wait:.4f}", f"{lo:.4f}", f"{hi:.4f}",
                                     acc, stab])
