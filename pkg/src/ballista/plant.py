"""Reduced thrower: five PD-driven joints plus one passive roll tilt.

Joint order is ``(base yaw, crouch height, shoulder yaw, shoulder pitch,
elbow pitch)``; the first two form the "body" group and the last three the
"arm" group. Angles are in rad, the crouch coordinate in m. The passive tilt
rolls the whole body about its forward axis and is excited by lateral hand
acceleration.

States are batched: every array carries a leading environment axis.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Tuple

import numpy as np

from ballista import kernels
from ballista._pykernels import _rk4
from ballista.ballistics import BallisticModel
from ballista.errors import InvalidArgumentError

N_JOINTS = 5
BODY = (0, 1)
ARM = (2, 3, 4)
JOINT_NAMES = ("base_yaw", "crouch", "shoulder_yaw", "shoulder_pitch", "elbow_pitch")


@dataclass(frozen=True)
class Randomization:
    """Per-episode perturbations and per-step observation noise half-widths."""

    enabled: bool = True
    arm_init: float = 0.3
    other_init: float = 0.025
    body_mass: float = 0.5
    min_body_mass: float = 0.1
    lin_vel_noise: float = 0.05
    joint_pos_noise: float = 0.01
    joint_vel_noise: float = 0.05


@dataclass(frozen=True)
class PlantConfig:
    L1: float = 0.3
    L2: float = 0.3
    m1: float = 0.6
    m2: float = 0.4
    ball_mass: float = 0.1
    body_mass: float = 6.0
    body_radius: float = 0.12
    shoulder_width: float = 0.15
    shoulder_height: float = 0.35
    knee_lever: float = 0.1
    crouch_range: Tuple[float, float] = (0.30, 0.60)
    nominal_height: float = 0.50
    height_bounds: Optional[Tuple[float, float]] = None
    body_kp: float = 40.0
    body_kd: float = 1.0
    arm_kp: float = 10.0
    arm_kd: float = 1.0
    torque_limits: Tuple[float, ...] = (4.0, 3.0, 1.5, 2.0, 0.6)
    joint_lower: Tuple[float, ...] = (-1.6, 0.30, -1.0, -2.2, -2.0)
    joint_upper: Tuple[float, ...] = (1.6, 0.60, 1.0, 1.6, 2.0)
    default_pose: Tuple[float, ...] = (0.0, 0.32, 0.0, 1.4, 0.2)
    tilt_radius: float = 0.35
    tilt_stiffness: float = 25.0
    tilt_damping: float = 3.0
    tilt_coupling: float = 3.0
    fall_bound: float = 0.35
    dt: float = 0.005
    randomization: Randomization = field(default_factory=Randomization)

    def __post_init__(self):
        positive = ("L1", "L2", "m1", "m2", "ball_mass", "body_mass", "body_radius", "knee_lever",
                    "body_kp", "body_kd", "arm_kp", "arm_kd", "tilt_radius", "fall_bound", "dt")
        for name in positive:
            if not getattr(self, name) > 0:
                raise InvalidArgumentError(f"{name} must be positive")
        if self.tilt_stiffness < 0 or self.tilt_damping < 0 or self.tilt_coupling < 0:
            raise InvalidArgumentError("tilt parameters must be non-negative")
        h_min, h_max = self.crouch_range
        if not h_min < h_max:
            raise InvalidArgumentError("crouch_range must satisfy h_min < h_max")
        for name in ("torque_limits", "joint_lower", "joint_upper", "default_pose"):
            if len(getattr(self, name)) != N_JOINTS:
                raise InvalidArgumentError(f"{name} must have {N_JOINTS} entries")
        if any(t <= 0 for t in self.torque_limits):
            raise InvalidArgumentError("torque limits must be positive")
        if any(lo >= hi for lo, hi in zip(self.joint_lower, self.joint_upper)):
            raise InvalidArgumentError("joint_lower must be below joint_upper")
        if isinstance(self.randomization, dict):
            object.__setattr__(self, "randomization", Randomization(**self.randomization))

    @classmethod
    def humanoid(cls) -> "PlantConfig":
        return cls()

    @classmethod
    def quadruped(cls) -> "PlantConfig":
        # stiffer base and arm, taller mount, heavier body
        return cls(L1=0.35, L2=0.35, m1=0.8, m2=0.5, body_mass=12.0, body_radius=0.2,
                   shoulder_width=0.0, shoulder_height=0.25, crouch_range=(0.40, 0.60),
                   nominal_height=0.50, body_kp=80.0, body_kd=1.0, arm_kp=20.0, arm_kd=1.0,
                   torque_limits=(8.0, 6.0, 3.0, 4.0, 1.2),
                   joint_lower=(-1.2, 0.40, -1.5, -2.2, -2.0),
                   joint_upper=(1.2, 0.60, 1.5, 1.6, 2.0),
                   default_pose=(0.0, 0.50, 0.0, 1.4, 0.2),
                   tilt_radius=0.3, tilt_stiffness=80.0, tilt_damping=8.0)

    @property
    def safe_height(self) -> Tuple[float, float]:
        if self.height_bounds is not None:
            return tuple(self.height_bounds)
        return (0.5 * self.nominal_height, 1.2 * self.nominal_height)

    @property
    def geometry(self) -> np.ndarray:
        return np.array([self.L1, self.L2, self.shoulder_width, self.shoulder_height])

    @property
    def tilt_params(self) -> np.ndarray:
        return np.array([self.tilt_stiffness, self.tilt_damping, self.tilt_coupling,
                         self.m2 * self.L2])

    @property
    def kp(self) -> np.ndarray:
        return np.array([self.body_kp] * 2 + [self.arm_kp] * 3)

    @property
    def kd(self) -> np.ndarray:
        return np.array([self.body_kd] * 2 + [self.arm_kd] * 3)

    @property
    def lower(self) -> np.ndarray:
        return np.array(self.joint_lower, dtype=float)

    @property
    def upper(self) -> np.ndarray:
        return np.array(self.joint_upper, dtype=float)

    @property
    def default(self) -> np.ndarray:
        return np.array(self.default_pose, dtype=float)

    def joint_inertia(self, body_mass) -> np.ndarray:
        """Decoupled effective inertias, shape (n, 5), for per-env body masses."""
        body_mass = np.atleast_1d(np.asarray(body_mass, dtype=float))
        arm_mass = self.m1 + self.m2 + self.ball_mass
        reach = self.L1 + self.L2
        pitch = self.m1 * self.L1 ** 2 / 3.0 + (self.m2 + self.ball_mass) * (self.L1 + 0.5 * self.L2) ** 2
        elbow = self.m2 * self.L2 ** 2 / 3.0 + self.ball_mass * self.L2 ** 2
        yaw = (body_mass * self.body_radius ** 2
               + arm_mass * (self.shoulder_width ** 2 + (0.5 * reach) ** 2))
        crouch = (body_mass + arm_mass) * self.knee_lever ** 2
        out = np.empty((body_mass.size, N_JOINTS))
        out[:, 0] = yaw
        out[:, 1] = crouch
        out[:, 2] = pitch
        out[:, 3] = pitch
        out[:, 4] = elbow
        return out

    def tilt_inertia(self, body_mass) -> np.ndarray:
        body_mass = np.atleast_1d(np.asarray(body_mass, dtype=float))
        return (body_mass + self.m1 + self.m2 + self.ball_mass) * self.tilt_radius ** 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PlantConfig":
        data = dict(data)
        if "randomization" in data and isinstance(data["randomization"], dict):
            data["randomization"] = Randomization(**data["randomization"])
        for key in ("crouch_range", "height_bounds", "torque_limits", "joint_lower",
                    "joint_upper", "default_pose"):
            if data.get(key) is not None:
                data[key] = tuple(data[key])
        return cls(**data)


@dataclass
class PlantState:
    """Batched plant state; every field has a leading environment axis."""

    q: np.ndarray
    qd: np.ndarray
    alpha: np.ndarray
    alphad: np.ndarray
    body_mass: np.ndarray
    ball_attached: np.ndarray
    ball_pos: np.ndarray
    ball_vel: np.ndarray
    fault: np.ndarray
    height_min: np.ndarray
    height_max: np.ndarray

    @classmethod
    def default(cls, cfg: PlantConfig, n: int = 1) -> "PlantState":
        q = np.tile(cfg.default, (n, 1))
        state = cls(q=q, qd=np.zeros((n, N_JOINTS)), alpha=np.zeros(n), alphad=np.zeros(n),
                    body_mass=np.full(n, cfg.body_mass), ball_attached=np.ones(n, dtype=bool),
                    ball_pos=np.zeros((n, 3)), ball_vel=np.zeros((n, 3)),
                    fault=np.zeros(n, dtype=np.uint8), height_min=q[:, 1].copy(),
                    height_max=q[:, 1].copy())
        attach_ball(state, cfg)
        return state

    @property
    def n(self) -> int:
        return self.q.shape[0]

    @property
    def base_height(self) -> np.ndarray:
        return self.q[:, 1] * np.cos(self.alpha)

    def copy(self) -> "PlantState":
        return PlantState(**{k: v.copy() for k, v in self.__dict__.items()})

    def take(self, idx) -> "PlantState":
        return PlantState(**{k: v[idx].copy() for k, v in self.__dict__.items()})

    def put(self, idx, other: "PlantState") -> None:
        for k, v in self.__dict__.items():
            v[idx] = getattr(other, k)


@dataclass(frozen=True)
class MotorCommand:
    """Joint position targets as offsets from the default pose, shape (n, 5) or (5,)."""

    offsets: np.ndarray

    def targets(self, cfg: PlantConfig) -> np.ndarray:
        off = np.atleast_2d(np.asarray(self.offsets, dtype=float))
        return np.clip(cfg.default + off, cfg.lower, cfg.upper)


def end_effector_state(state: PlantState, cfg: PlantConfig):
    """Hand position and velocity in the robot frame, each of shape (n, 3)."""
    pos = np.empty((state.n, 3))
    vel = np.empty((state.n, 3))
    kernels.backend.hand_state(np.ascontiguousarray(state.q), np.ascontiguousarray(state.qd),
                               np.ascontiguousarray(state.alpha),
                               np.ascontiguousarray(state.alphad), cfg.geometry, pos, vel)
    return pos, vel


def attach_ball(state: PlantState, cfg: PlantConfig, mask=None) -> None:
    pos, vel = end_effector_state(state, cfg)
    sel = state.ball_attached if mask is None else (state.ball_attached & mask)
    state.ball_pos[sel] = pos[sel]
    state.ball_vel[sel] = vel[sel]


def _fly_ball(state: PlantState, dt: float, model: BallisticModel) -> None:
    free = ~state.ball_attached & (state.ball_pos[:, 2] > 0.0)
    if not free.any():
        return
    if model.is_vacuum:
        g = model.gravity
        state.ball_pos[free] += state.ball_vel[free] * dt
        state.ball_pos[free, 2] -= 0.5 * g * dt * dt
        state.ball_vel[free, 2] -= g * dt
    else:
        s = np.concatenate([state.ball_pos[free], state.ball_vel[free]], axis=1)
        s = _rk4(s, dt, model.drag_coeff, model.gravity)
        state.ball_pos[free] = s[:, :3]
        state.ball_vel[free] = s[:, 3:]
    grounded = free & (state.ball_pos[:, 2] <= 0.0)
    state.ball_pos[grounded, 2] = 0.0
    state.ball_vel[grounded] = 0.0


def step_inplace(state: PlantState, targets: np.ndarray, cfg: PlantConfig, n_sub: int = 1,
                 locked=None, ball_model: Optional[BallisticModel] = None) -> None:
    """Advance ``n_sub`` physics steps toward absolute joint ``targets`` (n, 5)."""
    locked_arr = np.zeros(N_JOINTS, dtype=np.uint8) if locked is None \
        else np.asarray(locked, dtype=np.uint8)
    state.height_min[:] = state.base_height
    state.height_max[:] = state.height_min
    for name in ("q", "qd"):
        setattr(state, name, np.ascontiguousarray(getattr(state, name)))
    kernels.backend.plant_step(
        state.q, state.qd, state.alpha, state.alphad,
        np.ascontiguousarray(targets, dtype=float),
        cfg.joint_inertia(state.body_mass), cfg.tilt_inertia(state.body_mass),
        cfg.kp, cfg.kd, np.asarray(cfg.torque_limits, dtype=float), cfg.lower, cfg.upper,
        locked_arr, cfg.geometry, cfg.tilt_params, float(cfg.dt), int(n_sub),
        state.height_min, state.height_max, state.fault, kernels.thread_count())
    model = ball_model if ball_model is not None else BallisticModel.vacuum()
    for _ in range(n_sub):
        _fly_ball(state, cfg.dt, model)
    attach_ball(state, cfg)


def step(state: PlantState, cmd: MotorCommand, cfg: PlantConfig, locked=None,
         ball_model: Optional[BallisticModel] = None) -> PlantState:
    """One physics step (``cfg.dt``) returning a new state."""
    new = state.copy()
    step_inplace(new, cmd.targets(cfg), cfg, 1, locked, ball_model)
    return new


def mechanical_energy(state: PlantState, cfg: PlantConfig, targets: np.ndarray) -> np.ndarray:
    """Kinetic plus PD-spring plus tilt-spring energy proxy, per env.

    The spring term integrates the torque-limited spring force, so it is
    quadratic near the target and linear beyond ``tau_max / kp``; with fixed
    targets this total never grows under the clamped PD law.
    """
    J = cfg.joint_inertia(state.body_mass)
    kin = 0.5 * np.sum(J * state.qd ** 2, axis=1)
    err = np.abs(np.atleast_2d(targets) - state.q)
    tau_max = np.asarray(cfg.torque_limits, dtype=float)
    knee = tau_max / cfg.kp
    spring = np.where(err <= knee, 0.5 * cfg.kp * err ** 2,
                      tau_max * (err - knee) + 0.5 * cfg.kp * knee ** 2)
    tilt = (0.5 * cfg.tilt_inertia(state.body_mass) * state.alphad ** 2
            + 0.5 * cfg.tilt_stiffness * state.alpha ** 2)
    return kin + spring.sum(axis=1) + tilt


def sample_randomization(cfg: PlantConfig, rng: np.random.Generator):
    """Draw (joint offsets (5,), body mass) for one episode from ``rng``.

    Always consumes the same number of draws so per-env streams stay aligned.
    """
    rz = cfg.randomization
    u = rng.uniform(-1.0, 1.0, N_JOINTS + 1)
    if not rz.enabled:
        return np.zeros(N_JOINTS), cfg.body_mass
    half = np.array([rz.other_init, rz.other_init, rz.arm_init, rz.arm_init, rz.arm_init])
    mass = max(cfg.body_mass + rz.body_mass * u[N_JOINTS], rz.min_body_mass)
    return half * u[:N_JOINTS], mass


def randomize(cfg: PlantConfig, state: PlantState, rng: np.random.Generator):
    """Domain-randomise a fresh single-env episode; returns ``(cfg, state)``."""
    if not cfg.randomization.enabled:
        return cfg, state
    offsets, mass = sample_randomization(cfg, rng)
    new = state.copy()
    new.q[:] = np.clip(cfg.default + offsets, cfg.lower, cfg.upper)
    new.qd[:] = 0.0
    new.body_mass[:] = mass
    attach_ball(new, cfg)
    return replace(cfg, body_mass=mass), new
