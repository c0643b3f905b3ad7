"""Discrete-time models: differential-drive kinematics and the cartpole.

Cartpole equations (frictionless, point-mass pole of length ``l``, angle
``theta`` measured from hanging down, so ``theta = pi`` is upright)::

    den      = m_c + m_p sin^2(theta)
    xddot    = (f + m_p sin(theta) (l thetadot^2 + g cos(theta))) / den
    thetaddot = (-f cos(theta) - m_p l thetadot^2 cos(theta) sin(theta)
                 - (m_c + m_p) g sin(theta)) / (l den)

integrated with classic RK4.  The differential drive uses explicit Euler on
``xdot = v cos(theta), ydot = v sin(theta), thetadot = omega``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class ContractError(ValueError):
    """Inputs violate an operation's shape or domain contract."""


class DiffDriveState(NamedTuple):
    x: float
    y: float
    theta: float


class DiffDriveControl(NamedTuple):
    v: float
    omega: float


class CartpoleState(NamedTuple):
    x: float
    x_dot: float
    theta: float
    theta_dot: float


@dataclass(frozen=True)
class DiffDriveConfig:
    dt: float = 0.02
    v_max: float = 1.5
    omega_max: float = 2.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ContractError(f"dt must be > 0, got {self.dt}")
        if not (self.v_max > 0 and self.omega_max > 0):
            raise ContractError("v_max and omega_max must be > 0")

    @property
    def u_min(self) -> np.ndarray:
        return np.array([-self.v_max, -self.omega_max])

    @property
    def u_max(self) -> np.ndarray:
        return np.array([self.v_max, self.omega_max])


@dataclass(frozen=True)
class CartpoleConfig:
    dt: float = 0.02
    cart_mass: float = 1.0
    pole_mass: float = 0.01
    pole_length: float = 1.0
    gravity: float = 9.81
    force_max: float = math.inf

    def __post_init__(self):
        if not self.dt > 0:
            raise ContractError(f"dt must be > 0, got {self.dt}")
        if not (self.cart_mass > 0 and self.pole_mass > 0 and self.pole_length > 0):
            raise ContractError("masses and pole length must be > 0")
        if not self.force_max > 0:
            raise ContractError("force_max must be > 0")

    @property
    def u_min(self) -> np.ndarray:
        return np.array([-self.force_max])

    @property
    def u_max(self) -> np.ndarray:
        return np.array([self.force_max])


def wrap_angle(a):
    """Wrap to (-pi, pi]; values already inside are returned untouched."""
    a = np.asarray(a, dtype=float)
    inside = (a > -math.pi) & (a <= math.pi)
    wrapped = math.pi - np.mod(math.pi - a, 2.0 * math.pi)
    out = np.where(inside, a, wrapped)
    return float(out) if out.ndim == 0 else out


def clamp_control(u, u_min, u_max) -> np.ndarray:
    return np.minimum(np.maximum(np.asarray(u, dtype=float), u_min), u_max)


def step_diff_drive(state, control, cfg: DiffDriveConfig) -> DiffDriveState:
    x, y, th = (float(s) for s in state)
    v, w = (float(c) for c in control)
    return DiffDriveState(
        x + v * math.cos(th) * cfg.dt,
        y + v * math.sin(th) * cfg.dt,
        wrap_angle(th + w * cfg.dt),
    )


def cartpole_derivative(s, force: float, cfg: CartpoleConfig) -> np.ndarray:
    _, xd, th, thd = s
    st, ct = math.sin(th), math.cos(th)
    mc, mp, l, g = cfg.cart_mass, cfg.pole_mass, cfg.pole_length, cfg.gravity
    den = mc + mp * st * st
    xdd = (force + mp * st * (l * thd * thd + g * ct)) / den
    thdd = (-force * ct - mp * l * thd * thd * ct * st - (mc + mp) * g * st) / (l * den)
    return np.array([xd, xdd, thd, thdd])


def step_cartpole(state, force, cfg: CartpoleConfig) -> CartpoleState:
    s = np.asarray(state, dtype=float)
    f = float(np.asarray(force, dtype=float).reshape(-1)[0])
    h = cfg.dt
    k1 = cartpole_derivative(s, f, cfg)
    k2 = cartpole_derivative(s + 0.5 * h * k1, f, cfg)
    k3 = cartpole_derivative(s + 0.5 * h * k2, f, cfg)
    k4 = cartpole_derivative(s + h * k3, f, cfg)
    return CartpoleState(*(s + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)))


def cartpole_energy(state, cfg: CartpoleConfig) -> float:
    _, xd, th, thd = state
    mc, mp, l, g = cfg.cart_mass, cfg.pole_mass, cfg.pole_length, cfg.gravity
    kinetic = 0.5 * (mc + mp) * xd**2 + mp * l * xd * thd * math.cos(th) + 0.5 * mp * l**2 * thd**2
    return kinetic - mp * g * l * math.cos(th)


_MODELS = {
    "diff_drive": (3, 2, step_diff_drive),
    "cartpole": (4, 1, step_cartpole),
}


def model_dims(model: str) -> tuple[int, int]:
    try:
        n, m, _ = _MODELS[model]
    except KeyError:
        raise ContractError(f"unknown model {model!r}") from None
    return n, m


def rollout(model: str, x0, controls, cfg) -> np.ndarray:
    """State trajectory of shape (N+1, n) under a control sequence of shape (N, m)."""
    n, m = model_dims(model)
    step = _MODELS[model][2]
    x0 = np.asarray(x0, dtype=float)
    u = np.asarray(controls, dtype=float)
    if u.ndim == 1 and m == 1:
        u = u[:, None]
    if x0.shape != (n,) or u.ndim != 2 or u.shape[1] != m:
        raise ContractError(f"{model}: expected x0 of shape ({n},) and controls (N, {m}), got {x0.shape} and {u.shape}")
    traj = np.empty((u.shape[0] + 1, n))
    traj[0] = x0
    for k in range(u.shape[0]):
        traj[k + 1] = step(traj[k], u[k], cfg)
    return traj
