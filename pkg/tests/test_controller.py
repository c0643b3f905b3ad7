import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from logmppi import backend
from logmppi.controller import (
    CartpoleProblem,
    ConfigurationError,
    ControllerConfig,
    DiffDriveProblem,
    MPPIController,
    RolloutBatch,
    importance_weights,
    shift_warm_start,
    smooth_sg,
    weighted_update,
)
from logmppi.costmap import CollisionLookup, RobotFootprint, inflate, world_grid
from logmppi.costs import ControlCostSpec, QuadraticStateCost, control_weights, cost_to_go
from logmppi.dynamics import CartpoleConfig, ContractError, DiffDriveConfig, rollout
from logmppi.sampling import GaussianNoiseSpec, match_nln_params

DD = DiffDriveConfig()


def nav_problem(goal=(5.0, 0.0, 0.0), lam=0.169, var=(0.002, 0.0022), lookup=None, nu=1200.0):
    control = ControlCostSpec(control_weights(lam, var), nu, lam)
    return DiffDriveProblem(DD, QuadraticStateCost([2.5, 2.5, 2.0], goal), control, 1.0, lookup=lookup)


def nav_cfg(noise, horizon=60, rollouts=64, lam=0.169, sg_window=21, **kw):
    return ControllerConfig(horizon, rollouts, lam, 1200.0, noise, 3, sg_window, **kw)


# -- configuration -------------------------------------------------------------


@pytest.mark.parametrize(
    "kw",
    [{"sg_window": 50}, {"sg_window": 3, "sg_order": 3}, {"horizon": 0}, {"rollouts": 0},
     {"lam": 0.0}, {"sg_window": 51, "horizon": 20}, {"u_min": [1, 1], "u_max": [0, 0]}],
)
def test_config_validation(kw):
    base = {"horizon": 100, "rollouts": 10, "lam": 1.0, "nu": 1.0, "noise": GaussianNoiseSpec([1.0, 1.0])}
    with pytest.raises(ConfigurationError):
        ControllerConfig(**{**base, **kw})


def test_controller_rejects_mismatched_problem():
    cfg = nav_cfg(GaussianNoiseSpec([1.0]), sg_window=None)
    with pytest.raises(ConfigurationError):
        MPPIController(cfg, nav_problem())
    with pytest.raises(ConfigurationError):
        MPPIController(nav_cfg(GaussianNoiseSpec([1.0, 1.0]), sg_window=None), nav_problem(nu=5.0))


# -- importance weights and the update --------------------------------------------


costs_st = arrays(float, st.integers(1, 60), elements=st.floats(0, 1e8))


@given(costs_st, st.floats(1e-3, 10.0))
def test_weights_are_normalized(costs, lam):
    w = importance_weights(costs, lam)
    assert abs(w.sum() - 1.0) <= 1e-12
    assert np.all(w >= 0)
    assert w[np.argmin(costs)] >= 1.0 / costs.size


@given(
    arrays(np.int64, st.integers(1, 60), elements=st.integers(0, 2**30)),
    st.floats(1e-2, 10.0),
    st.integers(-2**30, 2**30),
    st.integers(0, 2**32 - 1),
)
def test_update_is_invariant_to_cost_shift(ticks, lam, shift_ticks, seed):
    # costs and shift on a 2^-10 grid, so shifting them is exact in float64
    costs = ticks / 1024.0
    shift = shift_ticks / 1024.0
    r = np.random.default_rng(seed)
    du = r.normal(size=(costs.size, 7, 2))
    nominal = r.normal(size=(7, 2))
    a = weighted_update(nominal, RolloutBatch(du, costs, None, None), lam)
    b = weighted_update(nominal, RolloutBatch(du, costs + shift, None, None), lam)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_single_rollout_update_is_exact(rng):
    du = rng.normal(size=(1, 9, 2))
    nominal = rng.normal(size=(9, 2))
    out = weighted_update(nominal, RolloutBatch(du, np.array([123.0]), None, None), 0.5)
    assert np.array_equal(out, nominal + du[0])


def test_equal_costs_give_mean_perturbation(rng):
    du = rng.normal(size=(5, 4, 1))
    out = weighted_update(np.zeros((4, 1)), RolloutBatch(du, np.full(5, 7.0), None, None), 0.3)
    np.testing.assert_allclose(out, du.mean(axis=0), rtol=1e-14)


def test_two_rollout_softmax():
    lam = 0.7
    a, b = np.full((3, 1), 2.0), np.full((3, 1), -6.0)
    batch = RolloutBatch(np.stack([a, b]), np.array([0.0, lam * math.log(3.0)]), None, None)
    np.testing.assert_allclose(weighted_update(np.zeros((3, 1)), batch, lam), (3 * a + b) / 4, rtol=1e-14)


def test_crash_penalty_does_not_underflow():
    costs = np.array([1e7 + 5.0, 1e7 + 6.0])
    w = importance_weights(costs, 0.1)
    assert np.isfinite(w).all() and w.sum() == pytest.approx(1.0)


def test_empty_batch_is_a_contract_error():
    with pytest.raises(ContractError):
        weighted_update(np.zeros((3, 1)), RolloutBatch(np.zeros((0, 3, 1)), np.zeros(0), None, None), 1.0)


# -- Savitzky-Golay smoothing ---------------------------------------------------------


def _polyfit_oracle(seq, order, window):
    half = (window - 1) // 2
    padded = np.pad(seq, (half, half), mode="reflect")
    t = np.arange(-half, half + 1, dtype=float)
    out = np.empty_like(seq)
    for k in range(seq.size):
        coef = np.polyfit(t, padded[k:k + window], order)
        out[k] = coef[-1]
    return out


def test_sg_keeps_constants():
    seq = np.full((100, 2), 0.37)
    np.testing.assert_allclose(smooth_sg(seq, 5, 51), seq, rtol=0, atol=1e-14)


@pytest.mark.parametrize("order, window", [(3, 51), (5, 51), (1, 5)])
def test_sg_keeps_ramps_in_the_interior(order, window):
    seq = 0.3 + 0.01 * np.arange(100.0)
    out = smooth_sg(seq, order, window)
    half = (window - 1) // 2
    np.testing.assert_allclose(out[half:-half], seq[half:-half], rtol=0, atol=1e-10)


@pytest.mark.parametrize("order, window, n", [(3, 51, 250), (5, 51, 100), (2, 7, 30)])
def test_sg_matches_polyfit_oracle(order, window, n, rng):
    t = np.linspace(0, 4 * np.pi, n)
    seq = np.sin(t) + rng.normal(0, 0.2, n)
    np.testing.assert_allclose(smooth_sg(seq, order, window), _polyfit_oracle(seq, order, window), rtol=0, atol=1e-10)


def test_sg_is_per_channel(rng):
    seq = rng.normal(size=(60, 2))
    out = smooth_sg(seq, 3, 21)
    np.testing.assert_allclose(out[:, 1], smooth_sg(seq[:, 1], 3, 21), rtol=0, atol=1e-15)


def test_sg_rejects_bad_windows():
    with pytest.raises(ConfigurationError):
        smooth_sg(np.zeros(100), 3, 50)
    with pytest.raises(ConfigurationError):
        smooth_sg(np.zeros(10), 3, 51)


def test_warm_start_shift():
    seq = np.arange(8.0).reshape(4, 2)
    assert shift_warm_start(seq).tolist() == [[2, 3], [4, 5], [6, 7], [6, 7]]


# -- rollouts and control steps ------------------------------------------------------


def test_zero_noise_single_rollout_is_the_nominal_rollout():
    problem = nav_problem()
    cfg = ControllerConfig(40, 1, 0.169, 1200.0, GaussianNoiseSpec([0.0, 0.0]), sg_window=None)
    ctl = MPPIController(cfg, problem)
    nominal = np.column_stack([np.linspace(0, 1.5, 40), np.full(40, 0.2)])
    x0 = np.array([0.5, -0.2, 0.1])
    batch = ctl.generate_rollouts(x0, nominal, seed=3, keep_states=True)
    traj = rollout("diff_drive", x0, nominal, DD)
    np.testing.assert_allclose(batch.trajectories[0], traj, rtol=0, atol=1e-12)
    ref = cost_to_go(traj, nominal, np.zeros((40, 2)), problem.control, problem.goal, problem.goal)
    assert batch.costs[0] == pytest.approx(ref, rel=1e-12)


def test_zero_noise_at_goal_returns_zero_control():
    problem = nav_problem(goal=(0.0, 0.0, 0.0))
    cfg = nav_cfg(GaussianNoiseSpec([0.0, 0.0]))
    u, diag = MPPIController(cfg, problem).control_step(np.zeros(3))
    np.testing.assert_allclose(u, 0.0, atol=1e-12)
    assert diag.min_cost == 0.0


@pytest.mark.parametrize("noise", [GaussianNoiseSpec([0.023, 0.028]), match_nln_params([0.002, 0.0022])],
                         ids=["gaussian", "nln"])
def test_control_step_is_deterministic(noise):
    outs = []
    for _ in range(2):
        ctl = MPPIController(nav_cfg(noise), nav_problem(), seed=17)
        outs.append([ctl.control_step(np.array([0.0, 0.0, 0.2]))[0].tobytes() for _ in range(3)])
    assert outs[0] == outs[1]


def test_cartpole_swing_up_starts_moving():
    var = 0.0225
    control = ControlCostSpec(control_weights(0.07, var, 0.5), 1000.0, 0.07)
    problem = CartpoleProblem(CartpoleConfig(), control)
    cfg = ControllerConfig(100, 1000, 0.07, 1000.0, match_nln_params(var), 5, 51)
    u, _ = MPPIController(cfg, problem, seed=0).control_step(np.zeros(4))
    assert abs(u[0]) > 0


def test_nominal_is_the_shifted_plan():
    ctl = MPPIController(nav_cfg(match_nln_params([0.002, 0.0022])), nav_problem(), seed=1)
    x = np.zeros(3)
    for _ in range(3):
        u, _ = ctl.control_step(x)
        assert np.array_equal(ctl.nominal, shift_warm_start(ctl.last_plan))
        assert np.array_equal(u, ctl.last_plan[0])


def test_initial_nominal_is_zero_and_reset():
    ctl = MPPIController(nav_cfg(GaussianNoiseSpec([0.023, 0.028])), nav_problem())
    assert not ctl.nominal.any()
    ctl.control_step(np.zeros(3))
    ctl.reset()
    assert not ctl.nominal.any() and ctl.steps == 0


@given(arrays(float, (60, 2), elements=st.floats(-5, 5)), st.integers(0, 1000))
def test_applied_controls_respect_the_box(nominal, seed):
    ctl = MPPIController(nav_cfg(GaussianNoiseSpec([0.5, 0.5]), rollouts=16), nav_problem(), seed=seed)
    ctl.nominal = nominal
    u, _ = ctl.control_step(np.zeros(3))
    assert np.all(u <= DD.u_max) and np.all(u >= DD.u_min)
    assert np.all(ctl.last_plan <= DD.u_max) and np.all(ctl.last_plan >= DD.u_min)


def test_weighted_update_of_clamped_samples_stays_in_the_box():
    # the update is a convex combination of clamped samples, so clamping it
    # again before smoothing changes nothing
    noise = GaussianNoiseSpec([4.0, 4.0])
    ctl = MPPIController(nav_cfg(noise), nav_problem(), seed=2)
    batch = ctl.generate_rollouts(np.zeros(3), seed=0)
    plan = weighted_update(ctl.nominal, batch, ctl.cfg.lam)
    assert np.all(plan <= DD.u_max + 1e-12) and np.all(plan >= DD.u_min - 1e-12)
    a = MPPIController(nav_cfg(noise, clamp_before_smoothing=True), nav_problem(), seed=2)
    b = MPPIController(nav_cfg(noise), nav_problem(), seed=2)
    a.control_step(np.zeros(3))
    b.control_step(np.zeros(3))
    np.testing.assert_allclose(a.last_plan, b.last_plan, rtol=0, atol=1e-12)


def test_sampled_controls_are_clamped_before_the_dynamics():
    ctl = MPPIController(nav_cfg(GaussianNoiseSpec([9.0, 9.0]), sg_window=None), nav_problem())
    nominal = np.tile([1.4, 0.0], (60, 1))
    batch = ctl.generate_rollouts(np.zeros(3), nominal, seed=0, keep_states=True)
    applied = nominal + batch.perturbations
    assert np.all(applied <= DD.u_max + 1e-12) and np.all(applied >= DD.u_min - 1e-12)
    step = np.hypot(*np.diff(batch.trajectories[..., :2], axis=1).transpose(2, 0, 1))
    assert np.all(step <= DD.v_max * DD.dt + 1e-12)


def test_nonfinite_rollouts_are_flagged():
    control = ControlCostSpec([1.0], 1000.0, 1.0)
    problem = CartpoleProblem(CartpoleConfig(), control)
    cfg = ControllerConfig(30, 8, 1.0, 1000.0, GaussianNoiseSpec([1e300]), sg_window=None)
    batch = MPPIController(cfg, problem).generate_rollouts(np.zeros(4), seed=0)
    assert batch.nonfinite.all()
    assert np.all(np.isfinite(batch.costs)) and np.all(batch.costs > 0)


def _lookup():
    # off the straight path, so some rollouts clear them and some do not
    obstacles = np.array([[2.5, 1.0, 0.2], [3.5, -1.1, 0.3], [6.0, 1.2, 0.2]])
    grid = inflate(world_grid(obstacles, (8.0, 4.0)), 0.35)
    return CollisionLookup(grid, RobotFootprint(0.3))


@pytest.mark.parametrize("noise", [GaussianNoiseSpec([0.023, 0.028]), match_nln_params([0.002, 0.0022])],
                         ids=["gaussian", "nln"])
def test_batches_identical_across_thread_counts(noise):
    problem = nav_problem(lookup=_lookup())
    nominal = np.tile([1.5, 0.0], (100, 1))
    ref = None
    for threads in (1, 2, 8):
        ctl = MPPIController(nav_cfg(noise, horizon=100, rollouts=300), problem, threads=threads)
        b = ctl.generate_rollouts(np.array([0.0, 0.0, 0.0]), nominal, seed=(5, 0))
        cur = (b.perturbations.tobytes(), b.costs.tobytes(), b.crashed.tobytes())
        assert ref is None or cur == ref
        ref = cur


@pytest.mark.skipif("compiled" not in backend.BACKENDS, reason="compiled core not built")
def test_backends_agree_on_navigation_batches():
    problem = nav_problem(lookup=_lookup())
    nominal = np.tile([1.5, 0.0], (120, 1))
    out = {}
    for name in ("python", "compiled"):
        ctl = MPPIController(nav_cfg(GaussianNoiseSpec([0.023, 0.028]), horizon=120, rollouts=400), problem,
                             kernel=name)
        out[name] = ctl.generate_rollouts(np.zeros(3), nominal, seed=9, keep_states=True)
    a, b = out["python"], out["compiled"]
    assert a.crashed.any() and (~a.crashed).any()
    assert np.array_equal(a.crashed, b.crashed)
    np.testing.assert_allclose(a.costs, b.costs, rtol=1e-12)
    np.testing.assert_allclose(a.trajectories, b.trajectories, rtol=0, atol=1e-12)


@pytest.mark.skipif("compiled" not in backend.BACKENDS, reason="compiled core not built")
def test_backends_agree_on_cartpole_batches():
    control = ControlCostSpec(control_weights(0.07, 0.0225, 0.5), 1000.0, 0.07)
    problem = CartpoleProblem(CartpoleConfig(), control, terminal_weight=0.5)
    cfg = ControllerConfig(100, 200, 0.07, 1000.0, GaussianNoiseSpec([0.283]), 5, 51)
    costs = []
    for name in ("python", "compiled"):
        costs.append(MPPIController(cfg, problem, kernel=name).generate_rollouts(np.zeros(4), seed=1).costs)
    np.testing.assert_allclose(costs[0], costs[1], rtol=1e-12)


def test_crashed_rollouts_dominate_crash_free_ones():
    problem = nav_problem(lookup=_lookup())
    ctl = MPPIController(nav_cfg(match_nln_params([0.002, 0.0022]), horizon=250, rollouts=500), problem)
    ctl.nominal = np.tile([1.5, 0.0], (250, 1))
    _, diag = ctl.control_step(np.zeros(3))
    assert 0 < diag.n_crashed < 500
    assert diag.crash_dominance
    assert 1.0 <= diag.ess <= 500
