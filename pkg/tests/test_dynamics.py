import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from logmppi.dynamics import (
    CartpoleConfig,
    ContractError,
    DiffDriveConfig,
    cartpole_energy,
    clamp_control,
    rollout,
    step_cartpole,
    step_diff_drive,
    wrap_angle,
)

DD = DiffDriveConfig(dt=0.02, v_max=1.5, omega_max=2.0)
CP = CartpoleConfig()
finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_diff_drive_straight_along_x():
    assert step_diff_drive((0, 0, 0), (1.5, 0), DD) == pytest.approx((0.03, 0, 0), abs=1e-15)


def test_diff_drive_straight_along_y():
    s = step_diff_drive((0, 0, math.pi / 2), (1, 0), DiffDriveConfig(dt=0.1))
    assert s == pytest.approx((0.0, 0.1, math.pi / 2), abs=1e-15)


def test_diff_drive_pure_rotation():
    assert step_diff_drive((0, 0, 0), (0, 1), DiffDriveConfig(dt=0.1)) == pytest.approx((0, 0, 0.1))


def test_diff_drive_heading_wraps():
    s = step_diff_drive((0, 0, math.pi - 0.01), (0, 1), DiffDriveConfig(dt=0.1))
    assert s.theta == pytest.approx(-math.pi + 0.09)


def test_wrap_angle_range_and_identity_inside():
    assert wrap_angle(math.pi) == math.pi
    assert wrap_angle(-math.pi) == math.pi
    assert wrap_angle(0.3) == 0.3
    assert wrap_angle(3 * math.pi + 0.5) == pytest.approx(-math.pi + 0.5)


def test_cartpole_hanging_rest_is_fixed():
    assert step_cartpole((0, 0, 0, 0), 0.0, CP) == (0, 0, 0, 0)


def test_cartpole_upright_is_a_fixed_point():
    # sin(math.pi) is 1.2e-16, not 0, so the float upright pose moves by ~1e-21
    s = step_cartpole((0, 0, math.pi, 0), 0.0, CP)
    assert s == pytest.approx((0.0, 0.0, math.pi, 0.0), abs=1e-15)


def test_cartpole_upright_is_unstable():
    s = (0.0, 0.0, math.pi - 0.01, 0.0)
    dev = [abs(s[2] - math.pi)]
    for _ in range(50):
        s = step_cartpole(s, 0.0, CP)
        dev.append(abs(s[2] - math.pi))
    assert all(b > a for a, b in zip(dev, dev[1:]))


@pytest.mark.parametrize("x0", [(0, 0, 2.0, 0), (0, 1.0, 2.5, -1.0), (0, -0.5, 1.0, 3.0)])
def test_cartpole_energy_drift_is_small(x0):
    cfg = CartpoleConfig(dt=0.01)
    s = x0
    e0 = cartpole_energy(s, cfg)
    prev = e0
    for _ in range(200):  # 2 s
        s = step_cartpole(s, 0.0, cfg)
        e = cartpole_energy(s, cfg)
        assert abs(e - prev) < 0.01 * abs(e0)
        prev = e


def test_rollout_of_zero_controls_stays_at_origin():
    traj = rollout("diff_drive", np.zeros(3), np.zeros((40, 2)), DD)
    assert traj.shape == (41, 3)
    assert not np.any(traj)


def test_rollout_constant_speed_closed_form():
    n = 250
    traj = rollout("diff_drive", np.zeros(3), np.tile([1.2, 0.0], (n, 1)), DD)
    assert traj[-1, 0] == pytest.approx(n * DD.dt * 1.2, rel=1e-12)
    assert traj[-1, 1] == 0.0


@given(arrays(float, (25, 2), elements=st.floats(-3, 3)), arrays(float, 3, elements=st.floats(-3, 3)))
def test_rollout_is_composition_of_steps(u, x0):
    traj = rollout("diff_drive", x0, u, DD)
    s = x0
    assert np.array_equal(traj[0], x0)
    for k in range(u.shape[0]):
        s = step_diff_drive(s, u[k], DD)
        assert np.array_equal(traj[k + 1], s)


@given(arrays(float, (20, 1), elements=st.floats(-20, 20)))
def test_cartpole_rollout_is_composition_of_steps(u):
    traj = rollout("cartpole", np.zeros(4), u, CP)
    s = np.zeros(4)
    for k in range(u.shape[0]):
        s = step_cartpole(s, u[k], CP)
        assert np.array_equal(traj[k + 1], s)


@given(arrays(float, (30, 2), elements=finite), arrays(float, 3, elements=st.floats(-10, 10)))
def test_diff_drive_displacement_and_heading_bounds(u, x0):
    u = clamp_control(u, DD.u_min, DD.u_max)
    traj = rollout("diff_drive", x0, u, DD)
    step = np.hypot(*np.diff(traj[:, :2], axis=0).T)
    assert np.all(step <= DD.v_max * DD.dt + 1e-12)
    assert np.all(np.abs(traj[1:, 2]) <= math.pi)


@given(arrays(float, (10, 2), elements=finite))
def test_rollout_is_deterministic(u):
    a = rollout("diff_drive", np.zeros(3), u, DD)
    b = rollout("diff_drive", np.zeros(3), u, DD)
    assert a.tobytes() == b.tobytes()


def test_clamp_control_box():
    assert clamp_control([5.0, -7.0], DD.u_min, DD.u_max).tolist() == [1.5, -2.0]


@pytest.mark.parametrize(
    "model, x0, u",
    [("diff_drive", np.zeros(3), np.zeros((5, 1))), ("diff_drive", np.zeros(4), np.zeros((5, 2))),
     ("cartpole", np.zeros(4), np.zeros((5, 2))), ("unicycle", np.zeros(3), np.zeros((5, 2)))],
)
def test_rollout_dimension_mismatch(model, x0, u):
    with pytest.raises(ContractError):
        rollout(model, x0, u, DD if model != "cartpole" else CP)


@pytest.mark.parametrize("kwargs", [{"dt": 0.0}, {"cart_mass": -1.0}, {"pole_length": 0.0}, {"force_max": 0.0}])
def test_cartpole_config_validation(kwargs):
    with pytest.raises(ContractError):
        CartpoleConfig(**kwargs)
