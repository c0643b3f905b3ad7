"""Running, state, terminal and collision costs of a rollout.

These are the reference (one trajectory at a time) evaluations.  The batched
kernels in :mod:`logmppi.backend` compute the same quantities for whole
rollout batches and are tested against the functions here.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .dynamics import wrap_angle

CRASH_PENALTY = 1e7


@dataclass(frozen=True)
class QuadraticStateCost:
    q_diag: np.ndarray
    x_f: np.ndarray
    #: indices of state entries that are angles (residual wrapped before squaring)
    angular: tuple = (2,)

    def __post_init__(self):
        q = np.asarray(self.q_diag, dtype=float)
        if np.any(q < 0):
            raise ValueError(f"Q_diag entries must be >= 0, got {q}")
        object.__setattr__(self, "q_diag", q)
        object.__setattr__(self, "x_f", np.asarray(self.x_f, dtype=float))

    def residual(self, x) -> np.ndarray:
        d = np.asarray(x, dtype=float) - self.x_f
        for i in self.angular:
            d[..., i] = wrap_angle(d[..., i])
        return d

    def __call__(self, x) -> float:
        d = self.residual(x)
        return float(np.sum(self.q_diag * d * d))


def navigation_q_diag(v_des: float) -> np.ndarray:
    """Goal weights used for the navigation task, switched on the desired speed."""
    return np.array([5.0, 5.0, 2.0]) if v_des <= 1.0 else np.array([2.5, 2.5, 2.0])


@dataclass(frozen=True)
class ControlCostSpec:
    r_diag: np.ndarray
    nu: float
    lam: float

    def __post_init__(self):
        r = np.atleast_1d(np.asarray(self.r_diag, dtype=float))
        if np.any(r <= 0):
            raise ValueError(f"R_diag must be > 0, got {r}")
        if not (self.nu > 0 and self.lam > 0):
            raise ValueError("nu and lambda must be > 0")
        object.__setattr__(self, "r_diag", r)


def control_weights(lam: float, sigma2_n, scale: float = 1.0) -> np.ndarray:
    """``R = scale * lam * Sigma_n^(-1/2)`` for a diagonal ``Sigma_n``.

    ``scale`` is 0.5 for the cartpole task and 1 for navigation.
    """
    return scale * lam / np.sqrt(np.atleast_1d(np.asarray(sigma2_n, dtype=float)))


@dataclass
class CostBreakdown:
    state_cost: float = 0.0
    control_cost: float = 0.0
    collision_cost: float = 0.0
    terminal_cost: float = 0.0
    total: float = field(init=False, default=0.0)

    def __post_init__(self):
        self.total = self.state_cost + self.control_cost + self.collision_cost + self.terminal_cost


def control_cost(u, du, r_diag, nu: float) -> float:
    u = np.atleast_1d(np.asarray(u, dtype=float))
    du = np.atleast_1d(np.asarray(du, dtype=float))
    r = np.asarray(r_diag, dtype=float)
    return float(np.sum(r * (0.5 * (1.0 - 1.0 / nu) * du * du + u * du + 0.5 * u * u)))


def running_cost(x, u, du, spec: ControlCostSpec, state_cost_fn: Callable) -> float:
    """State cost plus the exploration-discounted quadratic control cost."""
    return float(state_cost_fn(x)) + control_cost(u, du, spec.r_diag, spec.nu)


def navigation_state_cost(x, goal: QuadraticStateCost, crashed: bool) -> float:
    return goal(x) + (CRASH_PENALTY if crashed else 0.0)


def cartpole_state_cost(x) -> float:
    px, xd, th, thd = (float(v) for v in x)
    return 10.0 * px * px + 1e3 * (1.0 + math.cos(th)) ** 2 + 2.0 * thd * thd + 2.0 * xd * xd


def cost_to_go(
    trajectory,
    nominal_controls,
    perturbations,
    spec: ControlCostSpec,
    state_cost_fn: Callable,
    terminal_fn: Optional[Callable] = None,
    crashed=None,
    crash_penalty: float = CRASH_PENALTY,
    breakdown: bool = False,
):
    """Terminal cost plus the running-cost fold over k = 0..N-1.

    ``crashed`` is an optional boolean per state (length N+1); it must already
    be latched.  A crashed state adds ``crash_penalty``, reported as collision
    cost.  With ``breakdown=True`` a :class:`CostBreakdown` is returned.
    """
    traj = np.asarray(trajectory, dtype=float)
    u = np.asarray(nominal_controls, dtype=float)
    du = np.asarray(perturbations, dtype=float)
    if u.ndim == 1:
        u, du = u[:, None], du[:, None]
    n_steps = u.shape[0]
    if traj.shape[0] != n_steps + 1 or du.shape != u.shape:
        raise ValueError("trajectory must have N+1 states and perturbations match the N nominal controls")
    flags = np.zeros(n_steps + 1, bool) if crashed is None else np.asarray(crashed, bool)

    state = ctrl = coll = 0.0
    total = 0.0
    for k in range(n_steps):
        q = float(state_cost_fn(traj[k]))
        c = control_cost(u[k], du[k], spec.r_diag, spec.nu)
        hit = crash_penalty if flags[k] else 0.0
        state += q
        ctrl += c
        coll += hit
        total += (q + hit) + c
    terminal = 0.0
    if terminal_fn is not None:
        terminal = float(terminal_fn(traj[n_steps]))
        hit = crash_penalty if flags[n_steps] else 0.0
        coll += hit
        total += terminal + hit
    if breakdown:
        return CostBreakdown(state, ctrl, coll, terminal)
    return total
