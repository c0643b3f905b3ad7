"""Receding-horizon MPPI / log-MPPI controller.

One :meth:`MPPIController.control_step` samples ``M`` perturbation sequences,
rolls them out through the batched kernels, forms the exponentially weighted
update of the nominal sequence, smooths it with a Savitzky-Golay filter,
clamps it to the control box, returns the first control and keeps the rest
(shifted by one step) as the warm start for the next call.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import savgol_coeffs

from . import backend
from .costs import CRASH_PENALTY, ControlCostSpec, QuadraticStateCost
from .costmap import CollisionLookup
from .dynamics import CartpoleConfig, ContractError, DiffDriveConfig
from .sampling import GaussianNoiseSpec, NlnParams, NoisePolicy, Seed, sample_batch


class ConfigurationError(ValueError):
    """Controller configuration is inconsistent."""


@dataclass(frozen=True)
class ControllerConfig:
    horizon: int
    rollouts: int
    lam: float
    nu: float
    noise: NoisePolicy
    sg_order: int = 3
    #: odd window length; ``None`` disables smoothing
    sg_window: Optional[int] = 51
    u_min: Optional[np.ndarray] = None
    u_max: Optional[np.ndarray] = None
    #: also clamp the weighted update before smoothing (final clamp always applies).
    #: The kernels return the clamped perturbations, so the update is already a
    #: convex combination of in-box controls and this only guards custom problems.
    clamp_before_smoothing: bool = False

    def __post_init__(self):
        if self.horizon < 1 or self.rollouts < 1:
            raise ConfigurationError("horizon and rollouts must be >= 1")
        if not (self.lam > 0 and self.nu > 0):
            raise ConfigurationError("lambda and nu must be > 0")
        if not isinstance(self.noise, (GaussianNoiseSpec, NlnParams)):
            raise ConfigurationError("noise must be a GaussianNoiseSpec or NlnParams")
        m = self.noise.dim
        lo = np.full(m, -np.inf) if self.u_min is None else np.broadcast_to(np.asarray(self.u_min, float), (m,)).copy()
        hi = np.full(m, np.inf) if self.u_max is None else np.broadcast_to(np.asarray(self.u_max, float), (m,)).copy()
        if np.any(lo > hi):
            raise ConfigurationError("u_min must not exceed u_max")
        object.__setattr__(self, "u_min", lo)
        object.__setattr__(self, "u_max", hi)
        if self.sg_window is not None:
            if self.sg_window % 2 != 1 or self.sg_window <= self.sg_order or self.sg_order < 0:
                raise ConfigurationError(f"SG window must be odd and larger than the order, got l={self.sg_window}, n={self.sg_order}")
            if (self.sg_window - 1) // 2 > self.horizon - 1:
                raise ConfigurationError(
                    f"SG window {self.sg_window} needs a horizon of at least {(self.sg_window + 1) // 2}, got {self.horizon}"
                )

    @property
    def control_dim(self) -> int:
        return self.noise.dim


@dataclass
class RolloutBatch:
    """Perturbations are the ones applied after clamping ``u + du`` to the box."""

    perturbations: np.ndarray
    costs: np.ndarray
    crashed: np.ndarray
    nonfinite: np.ndarray
    trajectories: Optional[np.ndarray] = None
    seed: Seed = 0


class DiffDriveProblem:
    """Navigation rollouts: goal-seeking quadratic cost plus latched crash penalty."""

    model = "diff_drive"
    state_dim = 3
    control_dim = 2

    def __init__(self, cfg: DiffDriveConfig, goal: QuadraticStateCost, control: ControlCostSpec,
                 terminal_weight: float = 1.0, crash_penalty: float = CRASH_PENALTY,
                 lookup: Optional[CollisionLookup] = None):
        self.cfg = cfg
        self.goal = goal
        self.control = control
        self.terminal_weight = float(terminal_weight)
        self.crash_penalty = float(crash_penalty)
        self.lookup = lookup

    @property
    def u_min(self):
        return self.cfg.u_min

    @property
    def u_max(self):
        return self.cfg.u_max

    def set_goal(self, x_f) -> None:
        self.goal = QuadraticStateCost(self.goal.q_diag, np.asarray(x_f, float), self.goal.angular)

    def evaluate(self, x0, nominal, du, states_out=None, threads=1, kernel=None):
        k = kernel or backend.get()
        return k.diffdrive_rollouts(
            np.asarray(x0, float), nominal, du, self.cfg.dt, self.cfg.u_min, self.cfg.u_max,
            self.goal.x_f, self.goal.q_diag, self.control.r_diag, self.control.nu,
            self.crash_penalty, self.terminal_weight,
            None if self.lookup is None else self.lookup.params(), states_out, threads,
        )


class CartpoleProblem:
    """Swing-up rollouts with the quadratic cartpole cost and no terminal cost by default."""

    model = "cartpole"
    state_dim = 4
    control_dim = 1

    def __init__(self, cfg: CartpoleConfig, control: ControlCostSpec, terminal_weight: float = 0.0):
        self.cfg = cfg
        self.control = control
        self.terminal_weight = float(terminal_weight)

    @property
    def u_min(self):
        return self.cfg.u_min

    @property
    def u_max(self):
        return self.cfg.u_max

    def evaluate(self, x0, nominal, du, states_out=None, threads=1, kernel=None):
        k = kernel or backend.get()
        c = self.cfg
        return k.cartpole_rollouts(
            np.asarray(x0, float), nominal, du, c.dt, -c.force_max, c.force_max,
            c.cart_mass, c.pole_mass, c.pole_length, c.gravity,
            self.control.r_diag, self.control.nu, self.terminal_weight, states_out, threads,
        )


def importance_weights(costs, lam: float) -> np.ndarray:
    """Softmax of ``-cost / lam`` with the minimum cost subtracted first."""
    c = np.asarray(costs, dtype=float)
    w = np.exp(-(c - c.min()) / lam)
    return w / w.sum()


def weighted_update(nominal, batch: RolloutBatch, lam: float) -> np.ndarray:
    """``u_k + sum_m w_m du_{k,m}`` for every step of the horizon."""
    if batch.costs.size == 0:
        raise ContractError("empty rollout batch")
    w = importance_weights(batch.costs, lam)
    m, n, d = batch.perturbations.shape
    step = (w @ batch.perturbations.reshape(m, n * d)).reshape(n, d)
    return np.asarray(nominal, dtype=float) + step


_SG_CACHE: dict = {}


def _sg_coeffs(window: int, order: int) -> np.ndarray:
    key = (window, order)
    if key not in _SG_CACHE:
        c = savgol_coeffs(window, order, use="dot")
        # the least-squares solve leaves the sum ~1e-12 off one; constants must pass through
        _SG_CACHE[key] = c / c.sum()
    return _SG_CACHE[key]


def smooth_sg(sequence, n_sg: int, l_sg: int) -> np.ndarray:
    """Savitzky-Golay smoothing of each channel with mirror padding.

    The sequence is extended by ``(l_sg - 1) / 2`` samples on each side,
    reflected about the end samples (the end sample itself is not repeated).
    """
    seq = np.asarray(sequence, dtype=float)
    squeeze = seq.ndim == 1
    if squeeze:
        seq = seq[:, None]
    half = (l_sg - 1) // 2
    if l_sg % 2 != 1 or l_sg <= n_sg:
        raise ConfigurationError(f"SG window must be odd and larger than the order, got l={l_sg}, n={n_sg}")
    if half > seq.shape[0] - 1:
        raise ConfigurationError(f"sequence of length {seq.shape[0]} is too short for SG window {l_sg}")
    padded = np.pad(seq, ((half, half), (0, 0)), mode="reflect")
    windows = sliding_window_view(padded, l_sg, axis=0)  # (N, m, l_sg)
    out = windows @ _sg_coeffs(l_sg, n_sg)
    return out[:, 0] if squeeze else out


def shift_warm_start(sequence) -> np.ndarray:
    seq = np.asarray(sequence, dtype=float)
    return np.concatenate([seq[1:], seq[-1:]], axis=0)


@dataclass
class StepDiagnostics:
    step: int
    min_cost: float
    mean_cost: float
    ess: float
    n_crashed: int
    n_nonfinite: int
    crash_dominance: bool
    time_ms: float
    control: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "step": self.step,
            "min_cost": self.min_cost,
            "mean_cost": self.mean_cost,
            "ess": self.ess,
            "n_crashed": self.n_crashed,
            "n_nonfinite": self.n_nonfinite,
            "crash_dominance": self.crash_dominance,
            "time_ms": self.time_ms,
            "control": self.control,
        }


class MPPIController:
    """Stateful receding-horizon optimizer; not safe for concurrent ``control_step`` calls."""

    def __init__(self, cfg: ControllerConfig, problem, seed: int = 0, threads: Optional[int] = None,
                 kernel: Optional[str] = None):
        if cfg.control_dim != problem.control_dim:
            raise ConfigurationError(
                f"noise dimension {cfg.control_dim} does not match the {problem.model} control dimension {problem.control_dim}"
            )
        if abs(problem.control.nu - cfg.nu) > 1e-12 * cfg.nu:
            raise ConfigurationError("controller nu and control-cost nu disagree")
        self.cfg = cfg
        self.problem = problem
        self.seed = int(seed)
        self.threads = threads if threads is not None else backend.default_threads()
        self.kernel = backend.get(kernel)
        self.u_lo = np.maximum(cfg.u_min, problem.u_min)
        self.u_hi = np.minimum(cfg.u_max, problem.u_max)
        self.steps = 0
        self.nominal = np.zeros((cfg.horizon, cfg.control_dim))
        self.last_plan: Optional[np.ndarray] = None
        self.last_batch: Optional[RolloutBatch] = None
        shape = (cfg.rollouts, cfg.horizon, cfg.control_dim)
        self._du = np.empty(shape)

    def reset(self, nominal=None) -> None:
        self.steps = 0
        self.nominal = np.zeros_like(self.nominal) if nominal is None else np.array(nominal, dtype=float)
        self.last_plan = None

    def clamp(self, seq) -> np.ndarray:
        return np.minimum(np.maximum(seq, self.u_lo), self.u_hi)

    def generate_rollouts(self, x0, nominal=None, seed: Seed = 0, keep_states: bool = False,
                          _reuse: bool = False) -> RolloutBatch:
        cfg = self.cfg
        nominal = self.nominal if nominal is None else np.asarray(nominal, dtype=float)
        if nominal.shape != (cfg.horizon, cfg.control_dim):
            raise ContractError(f"nominal must have shape {(cfg.horizon, cfg.control_dim)}, got {nominal.shape}")
        nominal = np.ascontiguousarray(nominal)
        du = self._du if _reuse else np.empty_like(self._du)
        sample_batch(cfg.noise, cfg.rollouts, cfg.horizon, seed, threads=self.threads, out=du, kernel=self.kernel)
        states = np.empty((cfg.rollouts, cfg.horizon + 1, self.problem.state_dim)) if keep_states else None
        # kernels clamp u + du to the control box and write back the applied du
        costs, crashed, bad = self.problem.evaluate(x0, nominal, du, states, self.threads, self.kernel)
        return RolloutBatch(du, costs, crashed, bad, states, seed)

    def control_step(self, x0, keep_states: bool = False):
        """Optimize from state ``x0``; returns ``(u0, StepDiagnostics)``."""
        t0 = time.perf_counter()
        cfg = self.cfg
        batch = self.generate_rollouts(x0, self.nominal, (self.seed, self.steps), keep_states, _reuse=not keep_states)
        plan = weighted_update(self.nominal, batch, cfg.lam)
        if cfg.clamp_before_smoothing:
            plan = self.clamp(plan)
        if cfg.sg_window is not None:
            plan = smooth_sg(plan, cfg.sg_order, cfg.sg_window)
        plan = self.clamp(plan)
        u0 = plan[0].copy()
        self.last_plan = plan
        self.nominal = shift_warm_start(plan)
        elapsed = (time.perf_counter() - t0) * 1e3

        w = importance_weights(batch.costs, cfg.lam)
        crashed = batch.crashed
        dominance = True
        if crashed.any() and (~crashed).any():
            dominance = bool(batch.costs[crashed].min() > batch.costs[~crashed].max())
        diag = StepDiagnostics(
            step=self.steps,
            min_cost=float(batch.costs.min()),
            mean_cost=float(batch.costs.mean()),
            ess=float(1.0 / np.sum(w * w)),
            n_crashed=int(crashed.sum()),
            n_nonfinite=int(batch.nonfinite.sum()),
            crash_dominance=dominance,
            time_ms=elapsed,
            control=[float(v) for v in u0],
        )
        self.last_batch = batch if keep_states else None
        self.steps += 1
        return u0, diag
