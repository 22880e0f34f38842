"""Pure-numpy twins of the compiled kernels in ``_ckernels.pyx``.

Same signatures, same output buffers, vectorised across the batch instead of
looping per row. Used when the extension is not built or when
``BALLISTA_PURE_PYTHON=1``.
"""
import math

import numpy as np

INVPHI = (math.sqrt(5.0) - 1.0) / 2.0
INVPHI2 = (3.0 - math.sqrt(5.0)) / 2.0
GOLDEN_TOL = 1e-12
GROUND_BISECT_ITERS = 60


def _drag_deriv(s, c, g):
    speed = np.sqrt(np.sum(s[:, 3:] ** 2, axis=1, keepdims=True))
    out = np.empty_like(s)
    out[:, :3] = s[:, 3:]
    out[:, 3:] = -c * speed * s[:, 3:]
    out[:, 5] -= g
    return out


def _rk4(s, h, c, g):
    h = np.asarray(h, dtype=float).reshape(-1, 1) if np.ndim(h) else h
    k1 = _drag_deriv(s, c, g)
    k2 = _drag_deriv(s + 0.5 * h * k1, c, g)
    k3 = _drag_deriv(s + 0.5 * h * k2, c, g)
    k4 = _drag_deriv(s + h * k3, c, g)
    return s + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _golden(f, lo, hi):
    h = hi - lo
    n_iter = int(math.ceil(math.log(GOLDEN_TOL / max(float(h.max(initial=0.0)), GOLDEN_TOL * 2))
                           / math.log(INVPHI)))
    x1 = lo + INVPHI2 * h
    x2 = lo + INVPHI * h
    f1 = f(x1)
    f2 = f(x2)
    for _ in range(max(n_iter, 0)):
        h = INVPHI * h
        left = f1 < f2
        # left: keep [lo, x2]; right: keep [x1, hi]
        new_lo = np.where(left, lo, x1)
        new_x1 = np.where(left, new_lo + INVPHI2 * h, x2)
        new_x2 = np.where(left, x1, new_lo + INVPHI * h)
        new_f1 = np.where(left, np.nan, f2)
        new_f2 = np.where(left, f1, np.nan)
        fx = f(np.where(left, new_x1, new_x2))
        new_f1 = np.where(left, fx, new_f1)
        new_f2 = np.where(left, new_f2, fx)
        lo, x1, x2, f1, f2 = new_lo, new_x1, new_x2, new_f1, new_f2
    return np.minimum(f1, f2)


def _min_dist_vacuum(p0, v0, tgt, g, dt, t_max):
    n = p0.shape[0]
    out = np.sqrt(np.sum((p0 - tgt) ** 2, axis=1))
    z0 = p0[:, 2]
    vz = v0[:, 2]
    disc = vz * vz + 2.0 * g * z0
    live = ~((z0 <= 0.0) & (vz <= 0.0)) & (disc >= 0.0)
    if not live.any():
        return out
    p0, v0, tgt = p0[live], v0[live], tgt[live]
    t_end = np.minimum((vz[live] + np.sqrt(disc[live])) / g, t_max)
    n_k = np.ceil(t_end / dt).astype(np.int64)
    ks = np.arange(int(n_k.max()) + 1, dtype=float)
    t = np.minimum(ks[None, :] * dt, t_end[:, None])

    def d2_at(tt):
        tt = tt[..., None]
        pos = p0[:, None, :] + v0[:, None, :] * tt
        pos[..., 2] -= 0.5 * g * tt[..., 0] ** 2
        return np.sum((pos - tgt[:, None, :]) ** 2, axis=-1)

    d2 = d2_at(t)
    best_k = np.argmin(d2, axis=1)
    best = d2[np.arange(len(best_k)), best_k]
    lo = np.maximum((best_k - 1) * dt, 0.0)
    hi = np.minimum((best_k + 1) * dt, t_end)

    def f(tt):
        return d2_at(tt[:, None])[:, 0]

    best = np.minimum(best, _golden(f, lo, hi))
    out[live] = np.sqrt(best)
    return out


def _min_dist_drag(p0, v0, tgt, c, g, dt, t_max):
    n = p0.shape[0]
    out = np.sqrt(np.sum((p0 - tgt) ** 2, axis=1))
    live_idx = np.flatnonzero(~((p0[:, 2] <= 0.0) & (v0[:, 2] <= 0.0)))
    if live_idx.size == 0:
        return out
    s = np.concatenate([p0[live_idx], v0[live_idx]], axis=1)
    tg = tgt[live_idx]
    m = s.shape[0]
    best = np.sum((s[:, :3] - tg) ** 2, axis=1)
    br = s.copy()
    t_br = np.zeros(m)
    t = np.zeros(m)
    active = np.ones(m, dtype=bool)
    while active.any():
        idx = np.flatnonzero(active)
        h = np.full(idx.size, dt)
        over = t[idx] + h >= t_max
        h[over] = t_max - t[idx][over]
        cur = s[idx]
        nxt = _rk4(cur, h, c, g)
        hit = nxt[:, 2] <= 0.0
        if hit.any():
            a = np.zeros(int(hit.sum()))
            b = h[hit].copy()
            base = cur[hit]
            for _ in range(GROUND_BISECT_ITERS):
                mid = 0.5 * (a + b)
                up = _rk4(base, mid, c, g)[:, 2] > 0.0
                a = np.where(up, mid, a)
                b = np.where(up, b, mid)
            h[hit] = b
            nxt[hit] = _rk4(base, b, c, g)
        d2 = np.sum((nxt[:, :3] - tg[idx]) ** 2, axis=1)
        improved = d2 < best[idx]
        imp_idx = idx[improved]
        br[imp_idx] = cur[improved]
        t_br[imp_idx] = t[idx][improved]
        best[imp_idx] = d2[improved]
        s[idx] = nxt
        t[idx] = t[idx] + h
        active[idx[over | hit]] = False
    hi = np.minimum(t_br + 2.0 * dt, t)

    def f(tt):
        st = _rk4(br, tt - t_br, c, g)
        return np.sum((st[:, :3] - tg) ** 2, axis=1)

    best = np.minimum(best, _golden(f, t_br.copy(), hi))
    out[live_idx] = np.sqrt(best)
    return out


def min_distance_batch(pos, vel, target, out, drag, gravity, dt, t_max, vacuum, n_threads=1):
    if pos.shape[0] == 0:
        return
    if vacuum:
        out[:] = _min_dist_vacuum(pos, vel, target, gravity, dt, t_max)
    else:
        out[:] = _min_dist_drag(pos, vel, target, drag, gravity, dt, t_max)


def _arm_terms(q, qd, geom):
    L1, L2 = geom[0], geom[1]
    s1, c1 = np.sin(q[:, 3]), np.cos(q[:, 3])
    s12, c12 = np.sin(q[:, 3] + q[:, 4]), np.cos(q[:, 3] + q[:, 4])
    dx = L1 * c1 + L2 * c12
    dz = -(L1 * s1 + L2 * s12)
    ddx = (-L1 * s1 - L2 * s12) * qd[:, 3] - L2 * s12 * qd[:, 4]
    ddz = (-L1 * c1 - L2 * c12) * qd[:, 3] - L2 * c12 * qd[:, 4]
    return dx, dz, ddx, ddz


def hand_state(q, qd, alpha, alphad, geom, pos, vel):
    w, sz = geom[2], geom[3]
    dx, dz, ddx, ddz = _arm_terms(q, qd, geom)
    s0, c0 = np.sin(q[:, 2]), np.cos(q[:, 2])
    bx = dx * c0
    by = -w + dx * s0
    bz = q[:, 1] + sz + dz
    vbx = ddx * c0 - dx * s0 * qd[:, 2]
    vby = ddx * s0 + dx * c0 * qd[:, 2]
    vbz = qd[:, 1] + ddz
    sa, ca = np.sin(alpha), np.cos(alpha)
    cx = bx
    cy = by * ca - bz * sa
    cz = by * sa + bz * ca
    vcx = vbx
    vcy = vby * ca - vbz * sa + (-by * sa - bz * ca) * alphad
    vcz = vby * sa + vbz * ca + (by * ca - bz * sa) * alphad
    sp, cp = np.sin(q[:, 0]), np.cos(q[:, 0])
    pos[:, 0] = cx * cp - cy * sp
    pos[:, 1] = cx * sp + cy * cp
    pos[:, 2] = cz
    vel[:, 0] = vcx * cp - vcy * sp + (-cx * sp - cy * cp) * qd[:, 0]
    vel[:, 1] = vcx * sp + vcy * cp + (cx * cp - cy * sp) * qd[:, 0]
    vel[:, 2] = vcz


def _lateral_vel(q, qd, geom):
    dx, _, ddx, _ = _arm_terms(q, qd, geom)
    s0, c0 = np.sin(q[:, 2]), np.cos(q[:, 2])
    return ddx * s0 + dx * c0 * qd[:, 2] + qd[:, 0] * dx * c0


def plant_step(q, qd, alpha, alphad, qdes, inertia, tilt_inertia, kp, kd, tau_max,
               q_lo, q_hi, locked, geom, tilt, dt, n_sub, hmin, hmax, fault, n_threads=1):
    free = ~locked.astype(bool)
    for _ in range(n_sub):
        vy0 = _lateral_vel(q, qd, geom)
        qd[:, ~free] = 0.0
        for j in np.flatnonzero(free):
            tau = np.clip(kp[j] * (qdes[:, j] - q[:, j]) - kd[j] * qd[:, j], -tau_max[j], tau_max[j])
            qd[:, j] += tau / inertia[:, j] * dt
            q[:, j] += qd[:, j] * dt
            low = q[:, j] < q_lo[j]
            high = q[:, j] > q_hi[j]
            q[low, j] = q_lo[j]
            q[high, j] = q_hi[j]
            qd[low & (qd[:, j] < 0.0), j] = 0.0
            qd[high & (qd[:, j] > 0.0), j] = 0.0
        vy1 = _lateral_vel(q, qd, geom)
        acc = (vy1 - vy0) / dt
        alphad += (-tilt[0] * alpha - tilt[1] * alphad + tilt[2] * tilt[3] * acc) / tilt_inertia * dt
        alpha += alphad * dt
        base_h = q[:, 1] * np.cos(alpha)
        np.minimum(hmin, base_h, out=hmin)
        np.maximum(hmax, base_h, out=hmax)
    bad = ~(np.all(np.isfinite(q), axis=1) & np.all(np.isfinite(qd), axis=1)
            & np.isfinite(alpha) & np.isfinite(alphad))
    fault[bad] = 1
