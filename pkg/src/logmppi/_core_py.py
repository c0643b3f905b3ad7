"""Pure numpy rollout kernels (fallback for the compiled ``_core``).

Vectorized over rollouts, sequential over the horizon.  Both backends take
the same arguments, and both overwrite ``du`` with the perturbation that was
actually applied after clamping.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np

NONFINITE_COST = 1e300

_PI = math.pi
_TWO_PI = 2.0 * math.pi


def _wrap(a: np.ndarray) -> np.ndarray:
    out = (a > _PI) | (a <= -_PI)
    if out.any():
        a = a.copy()
        a[out] = _PI - np.mod(_PI - a[out], _TWO_PI)
    return a


def fill_noise(bit_generators, out, sd_n, mu_ln, sd_ln, nln, block, nthreads=1):
    """Fill ``out`` block by block; block ``b`` draws from ``bit_generators[b]``.

    Each block takes all of its normal factors first, then (NLN only) all of
    its log-normal factors, so the result matches the compiled kernel.
    """
    m_roll = out.shape[0]
    if (len(bit_generators) - 1) * block >= m_roll or len(bit_generators) * block < m_roll:
        raise ValueError("bit generator count does not match the block layout")

    def one(b):
        rng = np.random.Generator(bit_generators[b])
        chunk = out[b * block:(b + 1) * block]
        rng.standard_normal(out=chunk)
        chunk *= sd_n
        if nln:
            w = rng.standard_normal(chunk.shape)
            w *= sd_ln
            w += mu_ln
            np.exp(w, out=w)
            chunk *= w

    if nthreads > 1 and len(bit_generators) > 1:
        with ThreadPoolExecutor(max_workers=nthreads) as pool:
            list(pool.map(one, range(len(bit_generators))))
    else:
        for b in range(len(bit_generators)):
            one(b)


def _lookup_query(lookup, x, y):
    code, lethal, ox, oy, res, radius, pad, oob = lookup
    h, w = code.shape
    j = np.floor((x - ox) / res).astype(np.int64) + pad
    i = np.floor((y - oy) / res).astype(np.int64) + pad
    inside = (i >= 0) & (i < h) & (j >= 0) & (j < w)
    out = np.full(x.shape, bool(oob))
    ii, jj = i[inside], j[inside]
    c = code[ii, jj]
    hit = c == 1
    amb = np.flatnonzero(c == 2)
    if amb.size:
        xs, ys = x[inside][amb], y[inside][amb]
        ai, aj = ii[amb], jj[amb]
        found = np.zeros(amb.size, dtype=bool)
        r2 = radius * radius
        for di in range(-pad, pad + 1):
            qi = ai + di
            cy = oy + (qi - pad + 0.5) * res
            for dj in range(-pad, pad + 1):
                qj = aj + dj
                ok = (qi >= 0) & (qi < h) & (qj >= 0) & (qj < w)
                leth = np.where(ok, lethal[np.clip(qi, 0, h - 1), np.clip(qj, 0, w - 1)] == 1, bool(oob))
                cx = ox + (qj - pad + 0.5) * res
                dx = cx - xs
                dy = cy - ys
                found |= leth & (dx * dx + dy * dy <= r2)
        hit[amb] = found
    out[inside] = hit
    return out


def diffdrive_rollouts(x0, u_nom, du, dt, u_lo, u_hi, goal, q_diag, r_diag, nu,
                       crash_penalty, terminal_weight, lookup=None, states_out=None, nthreads=1):
    """Roll out ``M`` perturbed sequences of the differential drive.

    Returns ``(costs, crashed, nonfinite)``.  ``lookup`` is
    :meth:`CollisionLookup.params` or None (no obstacles).
    """
    m_roll, horizon, _ = du.shape
    x = np.full(m_roll, float(x0[0]))
    y = np.full(m_roll, float(x0[1]))
    th = np.full(m_roll, float(x0[2]))
    cost = np.zeros(m_roll)
    crashed = np.zeros(m_roll, dtype=bool)
    gx, gy, gth = (float(g) for g in goal)
    q0, q1, q2 = (float(q) for q in q_diag)
    r0, r1 = float(r_diag[0]), float(r_diag[1])
    c_lin = 0.5 * (1.0 - 1.0 / nu)
    if states_out is not None:
        states_out[:, 0, 0], states_out[:, 0, 1], states_out[:, 0, 2] = x, y, th

    def state_cost():
        ex = x - gx
        ey = y - gy
        et = _wrap(th - gth)
        return q0 * ex * ex + q1 * ey * ey + q2 * et * et

    def update_crash():
        if lookup is None:
            return
        live = ~crashed
        if live.any():
            idx = np.flatnonzero(live)
            crashed[idx] = _lookup_query(lookup, x[idx], y[idx])

    for k in range(horizon):
        update_crash()
        q = state_cost() + np.where(crashed, crash_penalty, 0.0)
        u0, u1 = float(u_nom[k, 0]), float(u_nom[k, 1])
        v = np.minimum(np.maximum(u0 + du[:, k, 0], u_lo[0]), u_hi[0])
        w = np.minimum(np.maximum(u1 + du[:, k, 1], u_lo[1]), u_hi[1])
        d0 = v - u0
        d1 = w - u1
        du[:, k, 0] = d0
        du[:, k, 1] = d1
        c = r0 * (c_lin * d0 * d0 + u0 * d0 + 0.5 * u0 * u0) + r1 * (c_lin * d1 * d1 + u1 * d1 + 0.5 * u1 * u1)
        cost += q + c
        x = x + v * np.cos(th) * dt
        y = y + v * np.sin(th) * dt
        th = _wrap(th + w * dt)
        if states_out is not None:
            states_out[:, k + 1, 0], states_out[:, k + 1, 1], states_out[:, k + 1, 2] = x, y, th
    if terminal_weight != 0.0:
        update_crash()
        cost += terminal_weight * state_cost() + np.where(crashed, crash_penalty, 0.0)
    bad = ~np.isfinite(cost)
    cost[bad] = NONFINITE_COST
    return cost, crashed, bad


def _cartpole_deriv(xd, th, thd, f, mc, mp, l, g):
    st = np.sin(th)
    ct = np.cos(th)
    den = mc + mp * st * st
    xdd = (f + mp * st * (l * thd * thd + g * ct)) / den
    thdd = (-f * ct - mp * l * thd * thd * ct * st - (mc + mp) * g * st) / (l * den)
    return xd, xdd, thd, thdd


def cartpole_rollouts(x0, u_nom, du, dt, f_lo, f_hi, mc, mp, l, g, r, nu,
                      terminal_weight, states_out=None, nthreads=1):
    """Roll out ``M`` perturbed force sequences of the cartpole (RK4)."""
    m_roll, horizon, _ = du.shape
    s = [np.full(m_roll, float(v)) for v in x0]
    cost = np.zeros(m_roll)
    c_lin = 0.5 * (1.0 - 1.0 / nu)
    r = float(np.asarray(r).reshape(-1)[0])
    h = dt
    if states_out is not None:
        for n in range(4):
            states_out[:, 0, n] = s[n]

    def state_cost(px, xd, th, thd):
        a = 1.0 + np.cos(th)
        return 10.0 * px * px + 1e3 * (a * a) + 2.0 * thd * thd + 2.0 * xd * xd

    with np.errstate(all="ignore"):
        for k in range(horizon):
            u0 = float(u_nom[k, 0])
            f = np.minimum(np.maximum(u0 + du[:, k, 0], f_lo), f_hi)
            d0 = f - u0
            du[:, k, 0] = d0
            cost += state_cost(*s) + r * (c_lin * d0 * d0 + u0 * d0 + 0.5 * u0 * u0)
            px, xd, th, thd = s
            k1 = _cartpole_deriv(xd, th, thd, f, mc, mp, l, g)
            k2 = _cartpole_deriv(xd + 0.5 * h * k1[1], th + 0.5 * h * k1[2], thd + 0.5 * h * k1[3], f, mc, mp, l, g)
            k3 = _cartpole_deriv(xd + 0.5 * h * k2[1], th + 0.5 * h * k2[2], thd + 0.5 * h * k2[3], f, mc, mp, l, g)
            k4 = _cartpole_deriv(xd + h * k3[1], th + h * k3[2], thd + h * k3[3], f, mc, mp, l, g)
            s = [
                cur + h / 6.0 * (a + 2.0 * b + 2.0 * c + d)
                for cur, a, b, c, d in zip(s, k1, k2, k3, k4)
            ]
            if states_out is not None:
                for n in range(4):
                    states_out[:, k + 1, n] = s[n]
        if terminal_weight != 0.0:
            cost += terminal_weight * state_cost(*s)
    bad = ~np.isfinite(cost)
    cost[bad] = NONFINITE_COST
    return cost, np.zeros(m_roll, dtype=bool), bad
