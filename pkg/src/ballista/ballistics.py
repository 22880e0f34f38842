"""Projectile flight and the minimum trajectory-to-target distance.

All positions are in the robot frame with z up and the ground plane at z = 0.
The flight clock starts at release. Two flight models are supported: vacuum
(closed form) and Newtonian drag ``dv/dt = -g z - c |v| v`` integrated with
fixed-step RK4.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.integrate import solve_ivp

from ballista import kernels
from ballista.errors import InvalidArgumentError

GRAVITY = 9.81
COARSE_DT = 1e-3
T_MAX = 10.0


def _vec3(value, name):
    arr = np.asarray(value, dtype=float).reshape(-1)
    if arr.shape != (3,):
        raise InvalidArgumentError(f"{name} must be a 3-vector, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class ReleaseState:
    """Ball position (m) and velocity (m/s) at the instant the flight clock starts."""

    position: np.ndarray
    velocity: np.ndarray

    def __post_init__(self):
        pos = _vec3(self.position, "position")
        vel = _vec3(self.velocity, "velocity")
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(vel))):
            raise InvalidArgumentError("release state must be finite")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "velocity", vel)


@dataclass(frozen=True)
class BallisticModel:
    """Flight model. ``drag_coeff=None`` is vacuum; a number selects Newtonian drag (1/m)."""

    drag_coeff: Optional[float] = None
    gravity: float = GRAVITY

    def __post_init__(self):
        if not self.gravity > 0:
            raise InvalidArgumentError("gravity must be positive")
        if self.drag_coeff is not None and not self.drag_coeff >= 0:
            raise InvalidArgumentError("drag_coeff must be non-negative")

    @classmethod
    def vacuum(cls, gravity: float = GRAVITY) -> "BallisticModel":
        return cls(None, gravity)

    @classmethod
    def newtonian_drag(cls, drag_coeff: float, gravity: float = GRAVITY) -> "BallisticModel":
        return cls(float(drag_coeff), gravity)

    @property
    def is_vacuum(self) -> bool:
        return self.drag_coeff is None

    def to_dict(self) -> dict:
        return {"drag_coeff": self.drag_coeff, "gravity": self.gravity}

    @classmethod
    def from_dict(cls, data: dict) -> "BallisticModel":
        return cls(data.get("drag_coeff"), data.get("gravity", GRAVITY))


@dataclass
class Trajectory:
    """Sampled flight. The last sample is the first one at or below the ground,
    unless ``truncated`` is set because ``t_max`` was reached first."""

    times: np.ndarray
    positions: np.ndarray
    truncated: bool = False
    velocities: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def terminal(self):
        return float(self.times[-1]), self.positions[-1].copy()

    def __len__(self):
        return len(self.times)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "x", "y", "z"])
            for t, p in zip(self.times, self.positions):
                writer.writerow([f"{t:.9g}", f"{p[0]:.9g}", f"{p[1]:.9g}", f"{p[2]:.9g}"])


def vacuum_ground_time(z0: float, vz: float, gravity: float = GRAVITY) -> Optional[float]:
    """Time at which a vacuum flight from height ``z0`` returns to z = 0, or None."""
    if z0 <= 0.0 and vz <= 0.0:
        return None
    disc = vz * vz + 2.0 * gravity * z0
    if disc < 0.0:
        return None
    return (vz + math.sqrt(disc)) / gravity


def _drag_rhs(state, c, g):
    x, y, z, vx, vy, vz = state
    speed = math.sqrt(vx * vx + vy * vy + vz * vz)
    return (vx, vy, vz, -c * speed * vx, -c * speed * vy, -g - c * speed * vz)


def rk4_step(state, h, c, g):
    """One RK4 step of the drag ODE on a 6-tuple (x, y, z, vx, vy, vz)."""
    k1 = _drag_rhs(state, c, g)
    k2 = _drag_rhs([s + 0.5 * h * k for s, k in zip(state, k1)], c, g)
    k3 = _drag_rhs([s + 0.5 * h * k for s, k in zip(state, k2)], c, g)
    k4 = _drag_rhs([s + h * k for s, k in zip(state, k3)], c, g)
    return tuple(s + h / 6.0 * (a + 2.0 * b + 2.0 * cc + d)
                 for s, a, b, cc, d in zip(state, k1, k2, k3, k4))


def predict_trajectory(release: ReleaseState, model: BallisticModel,
                       dt: float = COARSE_DT, t_max: float = T_MAX) -> Trajectory:
    """Sample the flight at ``k * dt`` until the first sample with z <= 0.

    Vacuum flights are evaluated in closed form; drag flights are integrated
    with RK4 at step ``dt``. A release already on the ground and moving down
    gives a single-sample trajectory.
    """
    if not dt > 0:
        raise InvalidArgumentError("dt must be positive")
    p0, v0 = release.position, release.velocity
    g = model.gravity
    if p0[2] <= 0.0 and v0[2] <= 0.0:
        return Trajectory(np.zeros(1), p0[None, :].copy(), False, v0[None, :].copy())

    if model.is_vacuum:
        t_ground = vacuum_ground_time(p0[2], v0[2], g)
        truncated = t_ground is None or t_ground > t_max
        if truncated:
            n = int(math.floor(t_max / dt + 1e-9))
        else:
            n = int(math.ceil(t_ground / dt - 1e-12))
            # the ground sample must actually be at or below z = 0
            while p0[2] + v0[2] * n * dt - 0.5 * g * (n * dt) ** 2 > 0.0:
                n += 1
        times = np.arange(n + 1) * dt
        pos = p0[None, :] + v0[None, :] * times[:, None]
        pos[:, 2] -= 0.5 * g * times ** 2
        vel = np.repeat(v0[None, :], n + 1, axis=0)
        vel[:, 2] -= g * times
        return Trajectory(times, pos, truncated, vel)

    c = model.drag_coeff
    state = tuple(p0) + tuple(v0)
    times = [0.0]
    states = [state]
    k = 0
    truncated = False
    while True:
        if (k + 1) * dt > t_max + 1e-12:
            truncated = True
            break
        state = rk4_step(state, dt, c, g)
        k += 1
        times.append(k * dt)
        states.append(state)
        if state[2] <= 0.0:
            break
    arr = np.asarray(states)
    return Trajectory(np.asarray(times), arr[:, :3].copy(), truncated, arr[:, 3:].copy())


def landing(release: ReleaseState, model: BallisticModel, dt: float = COARSE_DT,
            t_max: float = T_MAX):
    """Exact ground-contact time and point, or ``None`` if the flight outlasts ``t_max``."""
    p0, v0 = release.position, release.velocity
    g = model.gravity
    if p0[2] <= 0.0 and v0[2] <= 0.0:
        return 0.0, p0.copy()
    if model.is_vacuum:
        t = vacuum_ground_time(p0[2], v0[2], g)
        if t is None or t > t_max:
            return None
        p = p0 + v0 * t
        p[2] = 0.0
        return t, p
    c = model.drag_coeff
    state = tuple(p0) + tuple(v0)
    t = 0.0
    while t < t_max:
        nxt = rk4_step(state, dt, c, g)
        if nxt[2] <= 0.0:
            lo, hi = 0.0, dt
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                if rk4_step(state, mid, c, g)[2] > 0.0:
                    lo = mid
                else:
                    hi = mid
            end = rk4_step(state, hi, c, g)
            p = np.array(end[:3])
            p[2] = 0.0
            return t + hi, p
        state = nxt
        t += dt
    return None


def landing_range(release: ReleaseState, model: BallisticModel) -> float:
    """Horizontal distance from the robot origin to the landing point (0 if never lands)."""
    hit = landing(release, model)
    if hit is None:
        return 0.0
    return float(math.hypot(hit[1][0], hit[1][1]))


def displacement_error_batch(positions, velocities, targets, model: BallisticModel,
                             dt: float = COARSE_DT, t_max: float = T_MAX,
                             out: Optional[np.ndarray] = None) -> np.ndarray:
    """Vectorised :func:`displacement_error` over rows of (n, 3) arrays."""
    pos = np.ascontiguousarray(positions, dtype=float).reshape(-1, 3)
    vel = np.ascontiguousarray(velocities, dtype=float).reshape(-1, 3)
    tgt = np.ascontiguousarray(targets, dtype=float).reshape(-1, 3)
    if not (pos.shape == vel.shape == tgt.shape):
        raise InvalidArgumentError("positions, velocities and targets must share shape (n, 3)")
    if not dt > 0:
        raise InvalidArgumentError("dt must be positive")
    if out is None:
        out = np.empty(pos.shape[0])
    drag = 0.0 if model.is_vacuum else float(model.drag_coeff)
    kernels.backend.min_distance_batch(pos, vel, tgt, out, drag, float(model.gravity),
                                       float(dt), float(t_max), model.is_vacuum,
                                       kernels.thread_count())
    return out


def displacement_error(release: ReleaseState, target, model: BallisticModel,
                       dt: float = COARSE_DT, t_max: float = T_MAX) -> float:
    """Minimum distance (m) between the flight, from release to ground contact, and ``target``.

    The flight is sampled every ``dt`` seconds and the best sample's two
    neighbouring intervals are refined by golden-section search, so the result
    is a continuous-time minimum rather than a grid minimum.
    """
    tgt = _vec3(target, "target")
    if tgt[2] < 0:
        raise InvalidArgumentError("target must not be below the ground plane")
    return float(displacement_error_batch(release.position, release.velocity, tgt,
                                          model, dt, t_max)[0])


def min_distance_bruteforce(release: ReleaseState, target, model: BallisticModel,
                            dt_fine: float = 1e-6, t_max: float = T_MAX) -> float:
    """Exhaustive minimum over a dense sampling of the flight. Test oracle only.

    The flight is sampled every 1e-4 s, then every ``dt_fine`` seconds across
    the two intervals around each local minimum of that sampling. Vacuum
    flights use the closed form; drag flights use an adaptive high-order
    integrator (DOP853) with dense output, independent of the RK4 path used
    elsewhere. The exact ground-contact point is always included.
    """
    if not dt_fine <= 1e-4:
        raise InvalidArgumentError("dt_fine must be at most 1e-4 s")
    tgt = _vec3(target, "target")
    p0, v0 = release.position, release.velocity
    g = model.gravity
    if p0[2] <= 0.0 and v0[2] <= 0.0:
        return float(np.linalg.norm(p0 - tgt))

    if model.is_vacuum:
        t_end = vacuum_ground_time(p0[2], v0[2], g)
        if t_end is None:
            return float(np.linalg.norm(p0 - tgt))
        t_end = min(t_end, t_max)

        def position(t):
            pos = p0[None, :] + v0[None, :] * t[:, None]
            pos[:, 2] -= 0.5 * g * t ** 2
            return pos
    else:
        c = model.drag_coeff

        def rhs(_t, s):
            speed = math.sqrt(s[3] ** 2 + s[4] ** 2 + s[5] ** 2)
            return [s[3], s[4], s[5], -c * speed * s[3], -c * speed * s[4], -g - c * speed * s[5]]

        def ground(_t, s):
            return s[2]

        ground.terminal = True
        ground.direction = -1
        sol = solve_ivp(rhs, (0.0, t_max), np.concatenate([p0, v0]), method="DOP853",
                        rtol=1e-12, atol=1e-12, events=ground, dense_output=True)
        t_end = float(sol.t[-1])
        if sol.t_events[0].size:
            t_end = float(sol.t_events[0][0])

        def position(t):
            return sol.sol(t)[:3].T

    coarse = 1e-4
    t = np.append(np.arange(0.0, t_end, coarse), t_end)
    d = np.sqrt(np.sum((position(t) - tgt[None, :]) ** 2, axis=1))
    best = float(d.min())
    left = np.r_[np.inf, d[:-1]]
    right = np.r_[d[1:], np.inf]
    for i in np.flatnonzero((d <= left) & (d <= right)):
        lo, hi = t[max(i - 1, 0)], t[min(i + 1, t.size - 1)]
        tf = np.append(np.arange(lo, hi, dt_fine), hi)
        df = np.sqrt(np.sum((position(tf) - tgt[None, :]) ** 2, axis=1))
        best = min(best, float(df.min()))
    return best


def random_cases(n: int, rng: np.random.Generator):
    """Random (positions, velocities, targets, drag) rows for verification sweeps.

    Half the cases are vacuum (drag ``nan``); the rest use a drag coefficient in
    [0.001, 0.05] 1/m. Release speeds stay below 20 m/s.
    """
    pos = np.column_stack([rng.uniform(-0.5, 0.5, n), rng.uniform(-0.5, 0.5, n),
                           rng.uniform(0.05, 1.5, n)])
    speed = rng.uniform(0.5, 20.0, n)
    az = rng.uniform(0.0, 2.0 * math.pi, n)
    el = rng.uniform(-0.5 * math.pi, 0.5 * math.pi, n)
    vel = speed[:, None] * np.column_stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az),
                                            np.sin(el)])
    r = rng.uniform(0.5, 14.0, n)
    cos_theta = rng.uniform(0.0, 1.0, n)
    phi = rng.uniform(0.0, 2.0 * math.pi, n)
    sin_theta = np.sqrt(1.0 - cos_theta ** 2)
    tgt = r[:, None] * np.column_stack([sin_theta * np.cos(phi), sin_theta * np.sin(phi),
                                        cos_theta])
    drag = np.where(rng.random(n) < 0.5, np.nan, rng.uniform(0.001, 0.05, n))
    return pos, vel, tgt, drag


def oracle_check(n_cases: int = 1000, seed: int = 0, error_offset: float = 0.0) -> dict:
    """Compare the fast displacement error against the dense-sampling oracle.

    Also checks that a drag flight with zero coefficient reproduces the vacuum
    samples. ``error_offset`` is added to every fast result; it exists so that
    the failure path of the check can itself be exercised.
    """
    rng = np.random.default_rng(seed)
    pos, vel, tgt, drag = random_cases(n_cases, rng)
    worst = 0.0
    for i in range(n_cases):
        model = BallisticModel.vacuum() if np.isnan(drag[i]) else \
            BallisticModel.newtonian_drag(drag[i])
        rel = ReleaseState(pos[i], vel[i])
        fast = displacement_error(rel, tgt[i], model) + error_offset
        worst = max(worst, abs(fast - min_distance_bruteforce(rel, tgt[i], model)))
    vac_worst = 0.0
    for i in range(min(n_cases, 25)):
        rel = ReleaseState(pos[i], vel[i])
        a = predict_trajectory(rel, BallisticModel.vacuum())
        b = predict_trajectory(rel, BallisticModel.newtonian_drag(0.0))
        m = min(len(a), len(b))
        if m:
            vac_worst = max(vac_worst, float(np.abs(a.positions[:m] - b.positions[:m]).max()))
    return {"n_cases": n_cases, "max_abs_error_diff": worst, "max_zero_drag_diff": vac_worst}
