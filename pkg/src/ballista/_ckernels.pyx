# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: batched minimum trajectory distance and plant physics.

Mirrors ``_pykernels`` function-for-function. Both backends take and fill
C-contiguous float64 arrays; callers own allocation.
"""
from libc.math cimport sqrt, sin, cos, fabs, ceil, log, isfinite
from cython.parallel cimport prange

cdef double INVPHI = 0.6180339887498949
cdef double INVPHI2 = 0.3819660112501051
cdef double GOLDEN_TOL = 1e-12
cdef int GROUND_BISECT_ITERS = 60


# ---------------------------------------------------------------- ballistics

cdef inline void _drag_deriv(const double* s, double c, double g, double* out) noexcept nogil:
    cdef double speed = sqrt(s[3] * s[3] + s[4] * s[4] + s[5] * s[5])
    out[0] = s[3]
    out[1] = s[4]
    out[2] = s[5]
    out[3] = -c * speed * s[3]
    out[4] = -c * speed * s[4]
    out[5] = -g - c * speed * s[5]


cdef inline void _rk4(const double* s, double h, double c, double g, double* out) noexcept nogil:
    cdef double k1[6]
    cdef double k2[6]
    cdef double k3[6]
    cdef double k4[6]
    cdef double tmp[6]
    cdef int i
    _drag_deriv(s, c, g, k1)
    for i in range(6):
        tmp[i] = s[i] + 0.5 * h * k1[i]
    _drag_deriv(tmp, c, g, k2)
    for i in range(6):
        tmp[i] = s[i] + 0.5 * h * k2[i]
    _drag_deriv(tmp, c, g, k3)
    for i in range(6):
        tmp[i] = s[i] + h * k3[i]
    _drag_deriv(tmp, c, g, k4)
    for i in range(6):
        out[i] = s[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])


cdef inline double _d2(const double* p, const double* tgt) noexcept nogil:
    cdef double dx = p[0] - tgt[0]
    cdef double dy = p[1] - tgt[1]
    cdef double dz = p[2] - tgt[2]
    return dx * dx + dy * dy + dz * dz


cdef inline double _vac_d2(const double* p0, const double* v0, const double* tgt,
                           double g, double t) noexcept nogil:
    cdef double p[3]
    p[0] = p0[0] + v0[0] * t
    p[1] = p0[1] + v0[1] * t
    p[2] = p0[2] + v0[2] * t - 0.5 * g * t * t
    return _d2(p, tgt)


cdef inline double _drag_d2(const double* s0, double t0, const double* tgt,
                            double c, double g, double t) noexcept nogil:
    cdef double s[6]
    _rk4(s0, t - t0, c, g, s)
    return _d2(s, tgt)


cdef double _golden(const double* a0, const double* a1, const double* tgt, double c, double g,
                    double t0, double lo, double hi, bint vacuum) noexcept nogil:
    # a0/a1: vacuum -> (p0, v0); drag -> a0 is the 6-state at t0, a1 unused
    cdef double h = hi - lo
    cdef double x1, x2, f1, f2
    cdef int n, k
    if h <= GOLDEN_TOL:
        if vacuum:
            return _vac_d2(a0, a1, tgt, g, lo)
        return _drag_d2(a0, t0, tgt, c, g, lo)
    n = <int>ceil(log(GOLDEN_TOL / h) / log(INVPHI))
    x1 = lo + INVPHI2 * h
    x2 = lo + INVPHI * h
    if vacuum:
        f1 = _vac_d2(a0, a1, tgt, g, x1)
        f2 = _vac_d2(a0, a1, tgt, g, x2)
    else:
        f1 = _drag_d2(a0, t0, tgt, c, g, x1)
        f2 = _drag_d2(a0, t0, tgt, c, g, x2)
    for k in range(n):
        h = INVPHI * h
        if f1 < f2:
            hi = x2
            x2 = x1
            f2 = f1
            x1 = lo + INVPHI2 * h
            if vacuum:
                f1 = _vac_d2(a0, a1, tgt, g, x1)
            else:
                f1 = _drag_d2(a0, t0, tgt, c, g, x1)
        else:
            lo = x1
            x1 = x2
            f1 = f2
            x2 = lo + INVPHI * h
            if vacuum:
                f2 = _vac_d2(a0, a1, tgt, g, x2)
            else:
                f2 = _drag_d2(a0, t0, tgt, c, g, x2)
    return f1 if f1 < f2 else f2


cdef double _min_dist_vacuum(const double* p0, const double* v0, const double* tgt,
                             double g, double dt, double t_max) noexcept nogil:
    cdef double z0 = p0[2]
    cdef double vz = v0[2]
    cdef double t_end, t, d2, best, lo, hi
    cdef long k, n, best_k
    cdef double disc = vz * vz + 2.0 * g * z0
    if (z0 <= 0.0 and vz <= 0.0) or disc < 0.0:
        return sqrt(_d2(p0, tgt))
    t_end = (vz + sqrt(disc)) / g
    if t_end > t_max:
        t_end = t_max
    n = <long>ceil(t_end / dt)
    best = _d2(p0, tgt)
    best_k = 0
    for k in range(1, n + 1):
        t = k * dt
        if t > t_end:
            t = t_end
        d2 = _vac_d2(p0, v0, tgt, g, t)
        if d2 < best:
            best = d2
            best_k = k
    lo = (best_k - 1) * dt
    if lo < 0.0:
        lo = 0.0
    hi = (best_k + 1) * dt
    if hi > t_end:
        hi = t_end
    d2 = _golden(p0, v0, tgt, 0.0, g, 0.0, lo, hi, True)
    if d2 < best:
        best = d2
    return sqrt(best)


cdef double _min_dist_drag(const double* p0, const double* v0, const double* tgt,
                           double c, double g, double dt, double t_max) noexcept nogil:
    cdef double s[6]
    cdef double nxt[6]
    cdef double prev[6]
    cdef double br[6]
    cdef double sub[6]
    cdef double t = 0.0
    cdef double t_prev = 0.0
    cdef double t_br = 0.0
    cdef double t_end = t_max
    cdef double best, d2, h, a, b, mid, hi
    cdef bint done = False
    cdef bint best_is_new = False
    cdef int i, it
    if p0[2] <= 0.0 and v0[2] <= 0.0:
        return sqrt(_d2(p0, tgt))
    for i in range(3):
        s[i] = p0[i]
        s[i + 3] = v0[i]
        prev[i] = p0[i]
        prev[i + 3] = v0[i]
        br[i] = p0[i]
        br[i + 3] = v0[i]
    best = _d2(p0, tgt)
    while not done:
        h = dt
        if t + h >= t_max:
            h = t_max - t
            done = True
        if h <= 0.0:
            break
        _rk4(s, h, c, g, nxt)
        if nxt[2] <= 0.0:
            # bracket the ground crossing inside this step
            a = 0.0
            b = h
            for it in range(GROUND_BISECT_ITERS):
                mid = 0.5 * (a + b)
                _rk4(s, mid, c, g, sub)
                if sub[2] > 0.0:
                    a = mid
                else:
                    b = mid
            h = b
            _rk4(s, h, c, g, nxt)
            done = True
        for i in range(6):
            prev[i] = s[i]
            s[i] = nxt[i]
        t_prev = t
        t = t + h
        d2 = _d2(s, tgt)
        if d2 < best:
            best = d2
            for i in range(6):
                br[i] = prev[i]
            t_br = t_prev
    t_end = t
    hi = t_br + 2.0 * dt
    if hi > t_end:
        hi = t_end
    d2 = _golden(br, br, tgt, c, g, t_br, t_br, hi, False)
    if d2 < best:
        best = d2
    return sqrt(best)


def min_distance_batch(const double[:, ::1] pos, const double[:, ::1] vel,
                       const double[:, ::1] target, double[::1] out,
                       double drag, double gravity, double dt, double t_max,
                       bint vacuum, int n_threads=1):
    cdef Py_ssize_t n = pos.shape[0]
    cdef Py_ssize_t i
    if n_threads <= 1:
        for i in range(n):
            if vacuum:
                out[i] = _min_dist_vacuum(&pos[i, 0], &vel[i, 0], &target[i, 0], gravity, dt, t_max)
            else:
                out[i] = _min_dist_drag(&pos[i, 0], &vel[i, 0], &target[i, 0], drag, gravity, dt, t_max)
    else:
        for i in prange(n, nogil=True, num_threads=n_threads, schedule="dynamic"):
            if vacuum:
                out[i] = _min_dist_vacuum(&pos[i, 0], &vel[i, 0], &target[i, 0], gravity, dt, t_max)
            else:
                out[i] = _min_dist_drag(&pos[i, 0], &vel[i, 0], &target[i, 0], drag, gravity, dt, t_max)


# ---------------------------------------------------------------- plant

cdef inline void _hand(const double* q, const double* qd, double alpha, double alphad,
                       const double* geom, double* pos, double* vel) noexcept nogil:
    # chain: Rz(psi) Rx(alpha) [shoulder (0,-w,h+sz)] Rz(q0) Ry(q1) L1 Ry(q2) L2
    cdef double L1 = geom[0]
    cdef double L2 = geom[1]
    cdef double w = geom[2]
    cdef double sz = geom[3]
    cdef double s1 = sin(q[3])
    cdef double c1 = cos(q[3])
    cdef double s12 = sin(q[3] + q[4])
    cdef double c12 = cos(q[3] + q[4])
    cdef double s0 = sin(q[2])
    cdef double c0 = cos(q[2])
    cdef double dx = L1 * c1 + L2 * c12
    cdef double dz = -(L1 * s1 + L2 * s12)
    cdef double ddx = (-L1 * s1 - L2 * s12) * qd[3] - L2 * s12 * qd[4]
    cdef double ddz = (-L1 * c1 - L2 * c12) * qd[3] - L2 * c12 * qd[4]
    cdef double bx = dx * c0
    cdef double by = -w + dx * s0
    cdef double bz = q[1] + sz + dz
    cdef double vbx = ddx * c0 - dx * s0 * qd[2]
    cdef double vby = ddx * s0 + dx * c0 * qd[2]
    cdef double vbz = qd[1] + ddz
    cdef double sa = sin(alpha)
    cdef double ca = cos(alpha)
    cdef double cx = bx
    cdef double cy = by * ca - bz * sa
    cdef double cz = by * sa + bz * ca
    cdef double vcx = vbx
    cdef double vcy = vby * ca - vbz * sa + (-by * sa - bz * ca) * alphad
    cdef double vcz = vby * sa + vbz * ca + (by * ca - bz * sa) * alphad
    cdef double sp = sin(q[0])
    cdef double cp = cos(q[0])
    pos[0] = cx * cp - cy * sp
    pos[1] = cx * sp + cy * cp
    pos[2] = cz
    vel[0] = vcx * cp - vcy * sp + (-cx * sp - cy * cp) * qd[0]
    vel[1] = vcx * sp + vcy * cp + (cx * cp - cy * sp) * qd[0]
    vel[2] = vcz


cdef inline double _lateral_vel(const double* q, const double* qd, const double* geom) noexcept nogil:
    # hand velocity along the yawed body's y axis, tilt excluded
    cdef double L1 = geom[0]
    cdef double L2 = geom[1]
    cdef double s1 = sin(q[3])
    cdef double c1 = cos(q[3])
    cdef double s12 = sin(q[3] + q[4])
    cdef double c12 = cos(q[3] + q[4])
    cdef double s0 = sin(q[2])
    cdef double c0 = cos(q[2])
    cdef double dx = L1 * c1 + L2 * c12
    cdef double ddx = (-L1 * s1 - L2 * s12) * qd[3] - L2 * s12 * qd[4]
    cdef double bx = dx * c0
    cdef double vby = ddx * s0 + dx * c0 * qd[2]
    return vby + qd[0] * bx


def hand_state(const double[:, ::1] q, const double[:, ::1] qd, const double[::1] alpha,
               const double[::1] alphad, const double[::1] geom,
               double[:, ::1] pos, double[:, ::1] vel):
    cdef Py_ssize_t n = q.shape[0]
    cdef Py_ssize_t i
    for i in range(n):
        _hand(&q[i, 0], &qd[i, 0], alpha[i], alphad[i], &geom[0], &pos[i, 0], &vel[i, 0])


cdef void _plant_one(double* q, double* qd, double* alpha, double* alphad,
                     const double* qdes, const double* inertia, double tilt_inertia,
                     const double* kp, const double* kd, const double* tau_max,
                     const double* q_lo, const double* q_hi, const unsigned char* locked,
                     const double* geom, const double* tilt, double dt, int n_sub,
                     double* hmin, double* hmax, unsigned char* fault) noexcept nogil:
    cdef int s, j
    cdef double tau, vy0, vy1, acc, base_h
    for s in range(n_sub):
        vy0 = _lateral_vel(q, qd, geom)
        for j in range(5):
            if locked[j]:
                qd[j] = 0.0
                continue
            tau = kp[j] * (qdes[j] - q[j]) - kd[j] * qd[j]
            if tau > tau_max[j]:
                tau = tau_max[j]
            elif tau < -tau_max[j]:
                tau = -tau_max[j]
            qd[j] = qd[j] + tau / inertia[j] * dt
            q[j] = q[j] + qd[j] * dt
            if q[j] < q_lo[j]:
                q[j] = q_lo[j]
                if qd[j] < 0.0:
                    qd[j] = 0.0
            elif q[j] > q_hi[j]:
                q[j] = q_hi[j]
                if qd[j] > 0.0:
                    qd[j] = 0.0
        vy1 = _lateral_vel(q, qd, geom)
        acc = (vy1 - vy0) / dt
        # tilt: J a'' = -k a - c a' + kappa * m2 L2 * a_y
        alphad[0] = alphad[0] + (-tilt[0] * alpha[0] - tilt[1] * alphad[0]
                                 + tilt[2] * tilt[3] * acc) / tilt_inertia * dt
        alpha[0] = alpha[0] + alphad[0] * dt
        base_h = q[1] * cos(alpha[0])
        if base_h < hmin[0]:
            hmin[0] = base_h
        if base_h > hmax[0]:
            hmax[0] = base_h
    for j in range(5):
        if not (isfinite(q[j]) and isfinite(qd[j])):
            fault[0] = 1
    if not (isfinite(alpha[0]) and isfinite(alphad[0])):
        fault[0] = 1


def plant_step(double[:, ::1] q, double[:, ::1] qd, double[::1] alpha, double[::1] alphad,
               const double[:, ::1] qdes, const double[:, ::1] inertia,
               const double[::1] tilt_inertia, const double[::1] kp, const double[::1] kd,
               const double[::1] tau_max, const double[::1] q_lo, const double[::1] q_hi,
               const unsigned char[::1] locked, const double[::1] geom, const double[::1] tilt,
               double dt, int n_sub, double[::1] hmin, double[::1] hmax,
               unsigned char[::1] fault, int n_threads=1):
    cdef Py_ssize_t n = q.shape[0]
    cdef Py_ssize_t i
    if n_threads <= 1:
        for i in range(n):
            _plant_one(&q[i, 0], &qd[i, 0], &alpha[i], &alphad[i], &qdes[i, 0], &inertia[i, 0],
                       tilt_inertia[i], &kp[0], &kd[0], &tau_max[0], &q_lo[0], &q_hi[0],
                       &locked[0], &geom[0], &tilt[0], dt, n_sub, &hmin[i], &hmax[i], &fault[i])
    else:
        for i in prange(n, nogil=True, num_threads=n_threads):
            _plant_one(&q[i, 0], &qd[i, 0], &alpha[i], &alphad[i], &qdes[i, 0], &inertia[i, 0],
                       tilt_inertia[i], &kp[0], &kd[0], &tau_max[0], &q_lo[0], &q_hi[0],
                       &locked[0], &geom[0], &tilt[0], dt, n_sub, &hmin[i], &hmax[i], &fault[i])
