"""Target commands, task modes and the three reward terms."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Tuple

import numpy as np

from ballista.errors import InvalidArgumentError

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class TargetCommand:
    """Spherical target: ``theta_tilde`` is the cosine of the polar angle,
    ``phi`` the azimuth from the robot's forward axis, ``r`` the radius (m)."""

    theta_tilde: float
    phi: float
    r: float

    def __post_init__(self):
        if not 0.0 <= self.theta_tilde <= 1.0:
            raise InvalidArgumentError(f"theta_tilde must lie in [0, 1], got {self.theta_tilde}")
        if not 0.0 <= self.phi < TWO_PI:
            raise InvalidArgumentError(f"phi must lie in [0, 2pi), got {self.phi}")
        if not self.r > 0.0:
            raise InvalidArgumentError(f"r must be positive, got {self.r}")


def spherical_to_cartesian(theta_tilde, phi, r):
    """Array version of :func:`to_cartesian`; returns shape (..., 3)."""
    theta_tilde = np.asarray(theta_tilde, dtype=float)
    sin_theta = np.sqrt(np.clip(1.0 - theta_tilde ** 2, 0.0, None))
    return np.stack([r * sin_theta * np.cos(phi), r * sin_theta * np.sin(phi),
                     r * theta_tilde * np.ones_like(np.asarray(phi, dtype=float))], axis=-1)


def to_cartesian(cmd: TargetCommand) -> np.ndarray:
    return spherical_to_cartesian(cmd.theta_tilde, cmd.phi, cmd.r)


@dataclass(frozen=True)
class TaskMode:
    kind: str = "general"
    distance_range: Tuple[float, float] = (1.0, 3.0)

    def __post_init__(self):
        if self.kind not in ("distance", "general"):
            raise InvalidArgumentError(f"unknown task kind {self.kind!r}")
        lo, hi = self.distance_range
        if not 0.0 < lo <= hi:
            raise InvalidArgumentError(f"invalid distance range {self.distance_range}")
        object.__setattr__(self, "distance_range", (float(lo), float(hi)))

    def with_range(self, lo: float, hi: float) -> "TaskMode":
        return TaskMode(self.kind, (lo, hi))


def sample_target(mode: TaskMode, rng: np.random.Generator) -> TargetCommand:
    lo, hi = mode.distance_range
    # always consume three draws so streams stay aligned across modes
    u_theta, u_phi, u_r = rng.random(3)
    r = lo + (hi - lo) * u_r
    if mode.kind == "distance":
        return TargetCommand(0.0, 0.0, r)
    phi = TWO_PI * u_phi
    if phi >= TWO_PI:  # guard the open upper end against rounding
        phi = 0.0
    return TargetCommand(float(u_theta), float(phi), float(r))


@dataclass(frozen=True)
class RewardConfig:
    """Reward weights and the shape constants of the roll term.

    ``lambda1..3`` multiply the throwing, stability and roll terms.
    ``reward_scale`` records the overall scale they were derived from.
    """

    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 0.0
    reward_scale: float = 1.0
    roll_margin: float = 0.1
    roll_sigmoid_gain: float = 10.0
    roll_sigmoid_center: float = 0.3
    detach_threshold: float = 0.25

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise InvalidArgumentError(f"{name} must be non-negative")
        if not self.roll_margin > 0:
            raise InvalidArgumentError("roll_margin must be positive")
        if not self.detach_threshold > 0:
            raise InvalidArgumentError("detach_threshold must be positive")

    @classmethod
    def from_weights(cls, reward_scale: float, stability_pct: float, roll_pct: float,
                     **kwargs) -> "RewardConfig":
        """Throwing weight = scale; stability and roll weights are fractions of it."""
        return cls(lambda1=reward_scale, lambda2=reward_scale * stability_pct,
                   lambda3=reward_scale * roll_pct, reward_scale=reward_scale, **kwargs)

    @classmethod
    def humanoid(cls) -> "RewardConfig":
        return cls.from_weights(2.54, 0.02, 0.17)

    @classmethod
    def humanoid_reduced(cls) -> "RewardConfig":
        """Weights used with the reduced humanoid plant.

        The stability term is heavier and the roll term lighter than in :meth:`humanoid`;
        with the published weights the dense roll term dominates on this plant and
        policies learn never to throw.
        """
        return cls.from_weights(2.54, 0.10, 0.02)

    @classmethod
    def quadruped(cls) -> "RewardConfig":
        return cls(1.0, 0.1, 0.0, 1.0)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RewardBreakdown:
    throwing: float = 0.0
    stability: float = 0.0
    roll: float = 0.0
    total: float = 0.0


@dataclass
class EpisodeSummary:
    """Per-episode bookkeeping used by the stability gate and evaluation."""

    released: bool = False
    detach_time: float = float("nan")
    E: float = float("nan")
    r: float = float("nan")
    min_base_height: float = float("inf")
    max_base_height: float = float("-inf")
    max_abs_tilt: float = 0.0
    fell: bool = False
    fault: bool = False
    height_bounds: Tuple[float, float] = (0.0, float("inf"))
    stability: float = 0.0
    throwing_reward: float = 0.0
    landing_range: float = float("nan")
    length: int = 0


def throwing_reward(E, r):
    """``1 - min(E / r, 1)``; works elementwise on arrays."""
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr <= 0):
        raise InvalidArgumentError("target distance r must be positive")
    val = 1.0 - np.minimum(np.asarray(E, dtype=float) / r_arr, 1.0)
    return float(val) if np.ndim(val) == 0 else val


def roll_penalty(roll, cfg: Optional[RewardConfig] = None):
    """Dense roll term: positive inside the safe margin, bounded below by -1."""
    margin, gain, center = 0.1, 10.0, 0.3
    if cfg is not None:
        margin, gain, center = cfg.roll_margin, cfg.roll_sigmoid_gain, cfg.roll_sigmoid_center
    a = np.abs(np.asarray(roll, dtype=float))
    val = np.expm1(1.0 - a / margin) / (1.0 + np.exp(-gain * (a - center)))
    return float(val) if np.ndim(val) == 0 else val


def stability_reward(summary: EpisodeSummary) -> float:
    """1 when the episode ended upright, within the height band, with the ball thrown."""
    lo, hi = summary.height_bounds
    ok = (summary.released
          and not summary.fell
          and not summary.fault
          and summary.min_base_height >= lo
          and summary.max_base_height <= hi)
    return 1.0 if ok else 0.0
