"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The long navigation runs are marked ``slow``; deselect them with
``pytest -m "not slow"``.
"""
import copy
import math

import numpy as np
import pytest
from scipy import integrate, stats

from logmppi import backend
from logmppi.config import load_preset, parse_config
from logmppi.controller import importance_weights, smooth_sg
from logmppi.costmap import FREE, OCCUPIED, UNKNOWN, OccupancyGrid, RobotFootprint, inflate, is_collision
from logmppi.costs import ControlCostSpec, QuadraticStateCost, control_cost, cost_to_go
from logmppi.experiments import (
    build_world,
    compare_schemes,
    controller_config,
    diff_drive_model,
    map_config,
    mission_spec,
    nominal_rollouts,
    run_experiment,
)
from logmppi.sampling import GaussianNoiseSpec, match_nln_params, nln_pdf, sample_batch, sample_nln
from logmppi.world import simulate_mission


@pytest.fixture
def report(capsys):
    """``report(n, ok, detail)`` prints the verdict line, then asserts ``ok``."""

    def _report(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\nacceptance {n}: {'PASS' if ok else 'FAIL'} ({detail})")
        assert ok, detail

    return _report


def preset_variant(name: str, **sections):
    """A bundled preset with some fields replaced, e.g. ``controller={"rollouts": 5}``."""
    raw = copy.deepcopy(load_preset(name).raw)
    for section, values in sections.items():
        if isinstance(values, dict):
            raw.setdefault(section, {}).update(values)
        else:
            raw[section] = values
    return parse_config(raw, name)


# -- 1. moment matching -------------------------------------------------------


def test_criterion_1_moment_matching(report):
    p = match_nln_params([0.002, 0.0225, 0.0022])
    got = [p.mu_ln[0], p.sigma2_ln[0], p.sigma2_nln[0], p.sigma2_nln[1], p.sigma2_nln[2]]
    want = [1.023, 0.048, 0.017, 0.283, 0.019]
    err = max(abs(g - w) for g, w in zip(got, want))
    report(1, err <= 1e-3, f"max |error| {err:.2e} against {want}")


# -- 2. sampler statistics ----------------------------------------------------


def test_criterion_2_nln_sampler_statistics(report):
    p = match_nln_params(0.002)
    z = sample_nln(p, 10**6, 7).samples[:, 0]
    n = z.size
    mean, var = z.mean(), z.var()
    se = math.sqrt(var / n)
    skew, kurt = stats.skew(z), stats.kurtosis(z)
    ok = abs(mean) <= 3 * se and abs(var / 0.017 - 1) <= 0.02 and abs(skew) < 0.02 and kurt > 0
    report(2, ok, f"mean {mean:.2e} (3 SE {3 * se:.2e}), var {var:.5f}, skew {skew:.4f}, excess kurtosis {kurt:.3f}")


# -- 3. pdf consistency -------------------------------------------------------


def test_criterion_3_nln_pdf_consistency(report):
    p = match_nln_params(0.002)
    total, _ = integrate.quad(lambda v: float(nln_pdf(v, p)), -3.0, 3.0, limit=200, points=[0.0])
    z = sample_nln(p, 10**6, 11).samples[:, 0]
    edges = np.linspace(-0.6, 0.6, 31)
    counts, _ = np.histogram(z, bins=edges)
    hist = counts / (z.size * np.diff(edges))
    # bin-averaged density by Simpson's rule on each bin
    sub = np.linspace(0.0, 1.0, 5)
    pts = edges[:-1, None] + np.diff(edges)[:, None] * sub
    dens = integrate.simpson(nln_pdf(pts, p), x=sub, axis=1)
    sup = float(np.max(np.abs(hist - dens)))
    ok = abs(total - 1.0) <= 1e-4 and sup < 0.05
    report(3, ok, f"integral {total:.7f}, histogram sup-norm {sup:.4f}")


# -- 4. rollout spread --------------------------------------------------------


def _endpoint_y_std(name: str) -> float:
    cfg = preset_variant(name, mission={"start": [0.0, 0.0, 0.0]})
    states = nominal_rollouts(cfg, seed=0)
    assert states.shape == (2500, 251, 3)
    return float(states[:, -1, 1].std())


def test_criterion_4_rollout_spread(report):
    log_std = _endpoint_y_std("forest_nav_log_mppi")
    mppi_std = _endpoint_y_std("forest_nav_mppi")
    report(4, log_std > mppi_std, f"endpoint y std: log-MPPI {log_std:.4f} m, MPPI {mppi_std:.4f} m")


# -- 5. and 6. cartpole --------------------------------------------------------


def test_criterion_5_cartpole_swing_up(report, tmp_path):
    res = run_experiment(load_preset("cartpole_log_mppi"), tmp_path)
    row = res["rows"][0]
    times = sorted(r["converge_time"] for r in res["runs"])
    report(5, row["S_T"] >= 9, f"{row['S_T']}/10 converged within 6 s; times {[round(t, 2) for t in times]}")


def test_criterion_6_few_sample_robustness(report, tmp_path):
    ss = {}
    for name in ("cartpole_log_mppi", "cartpole_mppi"):
        res = run_experiment(preset_variant(name, controller={"rollouts": 5}), tmp_path / name)
        ss[name] = res["rows"][0]["ss_x"]
    a, b = ss["cartpole_log_mppi"], ss["cartpole_mppi"]
    report(6, a < b, f"mean steady-state |x| over 10 seeds at M=5: log-MPPI {a:.4f} m, MPPI {b:.4f} m")


# -- 7. and 8. navigation -----------------------------------------------------


@pytest.mark.slow
def test_criterion_7_forest_navigation_comparison(report, tmp_path):
    a, b = load_preset("forest_nav_log_mppi"), load_preset("forest_nav_mppi")
    assert a.trials == 20
    res = compare_schemes(a, b, tmp_path, save_rollouts=False)
    ra, rb = res["rows"]
    na, nb = res["paired"]["a"]["N_lmin"], res["paired"]["b"]["N_lmin"]
    favors = na + nb == 0 or na / (na + nb) >= 0.5
    ok = ra["S_R"] >= rb["S_R"] and favors
    report(7, ok, f"S_R log-MPPI {ra['S_R']:.0f}% vs MPPI {rb['S_R']:.0f}%; N_lmin {na} vs {nb} "
                  f"over {res['paired']['joint_success']} jointly solved worlds")


@pytest.mark.slow
def test_criterion_8_unknown_forest(report, tmp_path):
    cfg = load_preset("unknown_forest_log_mppi")
    assert cfg.trials == 10 and cfg.map.mode == "sensed" and cfg.world.density == 0.1
    res = run_experiment(cfg, tmp_path, save_rollouts=False)
    clean = sum(1 for r in res["runs"] if r["success"] and r["n_crash"] == 0)
    v_ok = all(r["avg_speed"] <= cfg.mission.v_des + 1e-9 for r in res["runs"])
    reasons = [r["reason"] for r in res["runs"]]
    report(8, clean >= 8 and v_ok, f"{clean}/10 completed without crash; v_av <= v_des in every run: {v_ok}; {reasons}")


# -- 9. timing ----------------------------------------------------------------


def test_criterion_9_control_step_time(report):
    cfg = preset_variant("forest_nav_log_mppi", mission={"timeout": 2.0})
    ctrl = controller_config(cfg)
    assert (ctrl.rollouts, ctrl.horizon) == (2500, 250)
    metrics, _ = simulate_mission(build_world(cfg, 0), mission_spec(cfg), ctrl, diff_drive_model(cfg), 0,
                                  map_cfg=map_config(cfg), terminal_weight=cfg.controller.terminal_weight)
    med = metrics.t_mppi_median
    report(9, med <= 50.0, f"median control_step {med:.1f} ms over {metrics.steps} steps, "
                           f"backend {backend.NAME}, {backend.default_threads()} threads")


# -- 10. algebraic invariants -------------------------------------------------


def test_criterion_10_algebraic_invariants(report):
    rng = np.random.default_rng(10)
    failures = []

    costs = rng.integers(0, 2**20, 64) / 1024.0
    w = importance_weights(costs, 0.3)
    if abs(w.sum() - 1.0) > 1e-12 or not np.array_equal(w, importance_weights(costs + 1024.0, 0.3)):
        failures.append("softmax normalization or shift invariance")

    t = np.arange(40.0)[:, None]
    if not (np.allclose(smooth_sg(np.full((40, 1), 2.5), 3, 11), 2.5, rtol=0, atol=1e-14)
            and np.allclose(smooth_sg(3.0 * t - 1.0, 3, 11)[5:-5], (3.0 * t - 1.0)[5:-5], rtol=0, atol=1e-10)):
        failures.append("SG constant or ramp preservation")
    seq = rng.normal(size=(40, 1))
    padded = np.pad(seq[:, 0], 5, mode="reflect")
    oracle = [np.polyval(np.polyfit(np.arange(-5, 6), padded[k:k + 11], 3), 0.0) for k in range(40)]
    if not np.allclose(smooth_sg(seq, 3, 11)[:, 0], oracle, rtol=0, atol=1e-10):
        failures.append("SG polyfit oracle")

    spec = ControlCostSpec([0.3, 0.2], 700.0, 1.0)
    q = QuadraticStateCost([1.0, 2.0, 0.5], [0.0, 0.0, 0.0])
    traj, u, du = rng.normal(size=(6, 3)), rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    fold = 0.0
    for k in range(5):
        fold += q(traj[k]) + control_cost(u[k], du[k], spec.r_diag, spec.nu)
    if cost_to_go(traj, u, du, spec, q, q) != fold + q(traj[-1]):
        failures.append("cost-to-go additivity")

    cells = rng.choice([FREE, OCCUPIED, UNKNOWN], size=(30, 30), p=[0.9, 0.05, 0.05]).astype(np.uint8)
    g = OccupancyGrid(cells, 0.05, (0.0, 0.0))
    once = inflate(g, 0.12)
    if inflate(once, 0.12) != once:
        failures.append("inflation idempotence")
    small, large, fp = inflate(g, 0.05), inflate(g, 0.15), RobotFootprint(0.1)
    for x, y in rng.uniform(-0.2, 1.7, size=(300, 2)):
        if is_collision(small, (x, y), fp) and not is_collision(large, (x, y), fp):
            failures.append("collision monotonicity")
            break

    for policy in (match_nln_params([0.002, 0.0022]), GaussianNoiseSpec([0.023, 0.028])):
        one = sample_batch(policy, 300, 7, 99, threads=1)
        if not np.array_equal(one, sample_batch(policy, 300, 7, 99, threads=3)):
            failures.append("seed determinism across thread counts")

    report(10, not failures, "all invariants hold" if not failures else f"failed: {failures}")
