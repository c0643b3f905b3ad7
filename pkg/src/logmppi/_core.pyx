# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False, nonecheck=False
"""Compiled rollout kernels: one OpenMP task per rollout.

Same contract as ``logmppi._core_py``.
"""
import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport sin, cos, exp, floor, isfinite, fmod
from libc.stdint cimport uintptr_t
from cpython.pycapsule cimport PyCapsule_GetPointer
from numpy.random cimport bitgen_t
from numpy.random.c_distributions cimport random_standard_normal, random_standard_normal_fill

cnp.import_array()

cdef double NONFINITE_COST = 1e300
cdef double PI = 3.141592653589793
cdef double TWO_PI = 6.283185307179586


cdef inline double wrap(double a) noexcept nogil:
    cdef double b
    if a > PI or a <= -PI:
        b = fmod(PI - a, TWO_PI)
        if b < 0:
            b = b + TWO_PI
        return PI - b
    return a


cdef inline double fmin_(double a, double b) noexcept nogil:
    return a if a < b else b


cdef inline double fmax_(double a, double b) noexcept nogil:
    return a if a > b else b


cdef inline bint collides(double px, double py, const signed char[:, ::1] code,
                          const unsigned char[:, ::1] lethal, double ox, double oy,
                          double res, double r2, int pad, bint oob) noexcept nogil:
    cdef Py_ssize_t h = code.shape[0], w = code.shape[1]
    cdef Py_ssize_t i = <Py_ssize_t>floor((py - oy) / res) + pad
    cdef Py_ssize_t j = <Py_ssize_t>floor((px - ox) / res) + pad
    cdef Py_ssize_t qi, qj
    cdef signed char c
    cdef double cx, cy, dx, dy
    cdef bint leth
    if i < 0 or j < 0 or i >= h or j >= w:
        return oob
    c = code[i, j]
    if c == 0:
        return 0
    if c == 1:
        return 1
    for qi in range(i - pad, i + pad + 1):
        cy = oy + (qi - pad + 0.5) * res
        for qj in range(j - pad, j + pad + 1):
            if qi < 0 or qj < 0 or qi >= h or qj >= w:
                leth = oob
            else:
                leth = lethal[qi, qj] == 1
            if leth:
                cx = ox + (qj - pad + 0.5) * res
                dx = cx - px
                dy = cy - py
                if dx * dx + dy * dy <= r2:
                    return 1
    return 0


cdef double _dd_one(Py_ssize_t m, const double[::1] x0, const double[:, ::1] u_nom, double[:, :, ::1] du,
                    double dt, double vlo, double vhi, double wlo, double whi,
                    double gx, double gy, double gth, double q0, double q1, double q2,
                    double r0, double r1, double c_lin, double crash_penalty, double terminal_weight,
                    bint use_map, const signed char[:, ::1] code, const unsigned char[:, ::1] lethal,
                    double ox, double oy, double res, double r2, int pad, bint oob,
                    bint keep, double[:, :, ::1] states, unsigned char* crashed_out) noexcept nogil:
    cdef Py_ssize_t k, horizon = u_nom.shape[0]
    cdef double x = x0[0], y = x0[1], th = x0[2]
    cdef double cost = 0.0, q, c, ex, ey, et, u0, u1, v, w, d0, d1
    cdef bint crashed = 0
    if keep:
        states[m, 0, 0] = x
        states[m, 0, 1] = y
        states[m, 0, 2] = th
    for k in range(horizon):
        if use_map and not crashed:
            crashed = collides(x, y, code, lethal, ox, oy, res, r2, pad, oob)
        ex = x - gx
        ey = y - gy
        et = wrap(th - gth)
        q = q0 * ex * ex + q1 * ey * ey + q2 * et * et
        if crashed:
            q = q + crash_penalty
        u0 = u_nom[k, 0]
        u1 = u_nom[k, 1]
        v = fmin_(fmax_(u0 + du[m, k, 0], vlo), vhi)
        w = fmin_(fmax_(u1 + du[m, k, 1], wlo), whi)
        d0 = v - u0
        d1 = w - u1
        du[m, k, 0] = d0
        du[m, k, 1] = d1
        c = r0 * (c_lin * d0 * d0 + u0 * d0 + 0.5 * u0 * u0) + r1 * (c_lin * d1 * d1 + u1 * d1 + 0.5 * u1 * u1)
        cost = cost + (q + c)
        x = x + v * cos(th) * dt
        y = y + v * sin(th) * dt
        th = wrap(th + w * dt)
        if keep:
            states[m, k + 1, 0] = x
            states[m, k + 1, 1] = y
            states[m, k + 1, 2] = th
    if terminal_weight != 0.0:
        if use_map and not crashed:
            crashed = collides(x, y, code, lethal, ox, oy, res, r2, pad, oob)
        ex = x - gx
        ey = y - gy
        et = wrap(th - gth)
        q = q0 * ex * ex + q1 * ey * ey + q2 * et * et
        cost = cost + (terminal_weight * q + (crash_penalty if crashed else 0.0))
    crashed_out[m] = crashed
    return cost


def diffdrive_rollouts(x0, u_nom, du, double dt, u_lo, u_hi, goal, q_diag, r_diag, double nu,
                       double crash_penalty, double terminal_weight, lookup=None, states_out=None,
                       int nthreads=1):
    cdef const double[::1] x0v = np.ascontiguousarray(x0, dtype=np.float64)
    cdef const double[:, ::1] un = np.ascontiguousarray(u_nom, dtype=np.float64)
    cdef double[:, :, ::1] duv = du
    cdef Py_ssize_t M = duv.shape[0], m
    cdef double vlo = u_lo[0], vhi = u_hi[0], wlo = u_lo[1], whi = u_hi[1]
    cdef double gx = goal[0], gy = goal[1], gth = goal[2]
    cdef double q0 = q_diag[0], q1 = q_diag[1], q2 = q_diag[2]
    cdef double r0 = r_diag[0], r1 = r_diag[1]
    cdef double c_lin = 0.5 * (1.0 - 1.0 / nu)
    cdef bint use_map = lookup is not None
    cdef const signed char[:, ::1] code
    cdef const unsigned char[:, ::1] lethal
    cdef double ox = 0.0, oy = 0.0, res = 1.0, r2 = 0.0
    cdef int pad = 0
    cdef bint oob = 0
    if use_map:
        code, lethal, ox, oy, res, radius, pad, oob = lookup
        r2 = radius * radius
    else:
        code = np.zeros((1, 1), dtype=np.int8)
        lethal = np.zeros((1, 1), dtype=np.uint8)
    cdef bint keep = states_out is not None
    cdef double[:, :, ::1] st
    if keep:
        st = states_out
    else:
        st = np.zeros((1, 1, 1))
    costs = np.empty(M)
    crashed = np.zeros(M, dtype=np.uint8)
    cdef double[::1] cv = costs
    cdef unsigned char[::1] crv = crashed
    cdef unsigned char* crp = &crv[0]
    cdef int nt = nthreads if nthreads > 0 else 1
    for m in prange(M, nogil=True, num_threads=nt, schedule="static"):
        cv[m] = _dd_one(m, x0v, un, duv, dt, vlo, vhi, wlo, whi, gx, gy, gth, q0, q1, q2,
                        r0, r1, c_lin, crash_penalty, terminal_weight, use_map, code, lethal,
                        ox, oy, res, r2, pad, oob, keep, st, crp)
    bad = ~np.isfinite(costs)
    costs[bad] = NONFINITE_COST
    return costs, crashed.astype(bool), bad


cdef inline void _cp_deriv(double xd, double th, double thd, double f, double mc, double mp,
                           double l, double g, double* out) noexcept nogil:
    cdef double st = sin(th), ct = cos(th)
    cdef double den = mc + mp * st * st
    out[0] = xd
    out[1] = (f + mp * st * (l * thd * thd + g * ct)) / den
    out[2] = thd
    out[3] = (-f * ct - mp * l * thd * thd * ct * st - (mc + mp) * g * st) / (l * den)


cdef double _cp_one(Py_ssize_t m, const double[::1] x0, const double[:, ::1] u_nom, double[:, :, ::1] du,
                    double h, double flo, double fhi, double mc, double mp, double l, double g,
                    double r, double c_lin, double terminal_weight, bint keep,
                    double[:, :, ::1] states) noexcept nogil:
    cdef Py_ssize_t k, n, horizon = u_nom.shape[0]
    cdef double s[4]
    cdef double k1[4]
    cdef double k2[4]
    cdef double k3[4]
    cdef double k4[4]
    cdef double cost = 0.0, a, u0, f, d0
    for n in range(4):
        s[n] = x0[n]
        if keep:
            states[m, 0, n] = s[n]
    for k in range(horizon):
        u0 = u_nom[k, 0]
        f = fmin_(fmax_(u0 + du[m, k, 0], flo), fhi)
        d0 = f - u0
        du[m, k, 0] = d0
        a = 1.0 + cos(s[2])
        cost = cost + ((10.0 * s[0] * s[0] + 1e3 * (a * a) + 2.0 * s[3] * s[3] + 2.0 * s[1] * s[1])
                       + r * (c_lin * d0 * d0 + u0 * d0 + 0.5 * u0 * u0))
        _cp_deriv(s[1], s[2], s[3], f, mc, mp, l, g, k1)
        _cp_deriv(s[1] + 0.5 * h * k1[1], s[2] + 0.5 * h * k1[2], s[3] + 0.5 * h * k1[3], f, mc, mp, l, g, k2)
        _cp_deriv(s[1] + 0.5 * h * k2[1], s[2] + 0.5 * h * k2[2], s[3] + 0.5 * h * k2[3], f, mc, mp, l, g, k3)
        _cp_deriv(s[1] + h * k3[1], s[2] + h * k3[2], s[3] + h * k3[3], f, mc, mp, l, g, k4)
        for n in range(4):
            s[n] = s[n] + h / 6.0 * (k1[n] + 2.0 * k2[n] + 2.0 * k3[n] + k4[n])
            if keep:
                states[m, k + 1, n] = s[n]
    if terminal_weight != 0.0:
        a = 1.0 + cos(s[2])
        cost = cost + terminal_weight * (10.0 * s[0] * s[0] + 1e3 * (a * a) + 2.0 * s[3] * s[3] + 2.0 * s[1] * s[1])
    return cost


def cartpole_rollouts(x0, u_nom, du, double dt, double f_lo, double f_hi, double mc, double mp,
                      double l, double g, r, double nu, double terminal_weight, states_out=None,
                      int nthreads=1):
    cdef const double[::1] x0v = np.ascontiguousarray(x0, dtype=np.float64)
    cdef const double[:, ::1] un = np.ascontiguousarray(u_nom, dtype=np.float64)
    cdef double[:, :, ::1] duv = du
    cdef Py_ssize_t M = duv.shape[0], m
    cdef double rr = float(np.asarray(r).reshape(-1)[0])
    cdef double c_lin = 0.5 * (1.0 - 1.0 / nu)
    cdef bint keep = states_out is not None
    cdef double[:, :, ::1] st
    if keep:
        st = states_out
    else:
        st = np.zeros((1, 1, 1))
    costs = np.empty(M)
    cdef double[::1] cv = costs
    cdef int nt = nthreads if nthreads > 0 else 1
    for m in prange(M, nogil=True, num_threads=nt, schedule="static"):
        cv[m] = _cp_one(m, x0v, un, duv, dt, f_lo, f_hi, mc, mp, l, g, rr, c_lin, terminal_weight, keep, st)
    bad = ~np.isfinite(costs)
    costs[bad] = NONFINITE_COST
    return costs, np.zeros(M, dtype=bool), bad


cdef void _fill_block(bitgen_t* bg, double* out, Py_ssize_t count, Py_ssize_t m, const double* sd_n,
                      const double* mu_ln, const double* sd_ln, bint nln) noexcept nogil:
    cdef Py_ssize_t r, i, j
    random_standard_normal_fill(bg, count, out)
    # row by row so the channel index needs no modulo; draw order is unchanged
    for r in range(count // m):
        i = r * m
        for j in range(m):
            out[i + j] = out[i + j] * sd_n[j]
    if nln:
        # the log-normal factors come after all normal factors of the block
        for r in range(count // m):
            i = r * m
            for j in range(m):
                out[i + j] = out[i + j] * exp(random_standard_normal(bg) * sd_ln[j] + mu_ln[j])


def fill_noise(list bit_generators, double[:, :, ::1] out, sd_n, mu_ln, sd_ln, bint nln,
               Py_ssize_t block, int nthreads=1):
    """Fill ``out`` block by block; block ``b`` draws from ``bit_generators[b]``.

    Consumes the streams in the same order as the numpy path in
    ``logmppi.sampling`` (all normal factors of a block, then all
    log-normal factors).
    """
    cdef Py_ssize_t M = out.shape[0], N = out.shape[1], m = out.shape[2]
    cdef Py_ssize_t nblocks = len(bit_generators), b, start, rows
    cdef uintptr_t[::1] ptrs = np.empty(nblocks, dtype=np.uintp)
    cdef double[::1] sdn = np.ascontiguousarray(sd_n, dtype=np.float64)
    cdef double[::1] mu = np.ascontiguousarray(mu_ln, dtype=np.float64)
    cdef double[::1] sdl = np.ascontiguousarray(sd_ln, dtype=np.float64)
    if (nblocks - 1) * block >= M or nblocks * block < M:
        raise ValueError("bit generator count does not match the block layout")
    for b in range(nblocks):
        ptrs[b] = <uintptr_t>PyCapsule_GetPointer(bit_generators[b].capsule, "BitGenerator")
    cdef int nt = nthreads if nthreads > 0 else 1
    for b in prange(nblocks, nogil=True, num_threads=nt, schedule="dynamic"):
        start = b * block
        rows = M - start if M - start < block else block
        _fill_block(<bitgen_t*>ptrs[b], &out[start, 0, 0], rows * N * m, m, &sdn[0], &mu[0], &sdl[0], nln)
