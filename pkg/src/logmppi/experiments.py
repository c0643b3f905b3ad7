"""Experiment execution: trials, result tables and plot-data files.

Artifact layout of ``run_experiment(cfg, out)``::

    out/config.yaml          the validated config as run
    out/results.json         per-trial metrics and the summary (deterministic)
    out/timing.json          controller wall-clock statistics per trial
    out/table.txt, table.csv result table
    out/runs/trial_XXX/      metrics.json, trajectory.jsonl, diagnostics.jsonl,
                             world.jsonl (navigation), rollouts.npz (trial 0)
"""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .backend import default_threads
from .config import ExperimentConfig
from .controller import CartpoleProblem, ControllerConfig, MPPIController
from .costmap import GridParams, RobotFootprint, SensorSpec
from .costs import ControlCostSpec, control_weights
from .dynamics import CartpoleConfig, DiffDriveConfig, step_cartpole, wrap_angle
from .sampling import GaussianNoiseSpec, match_nln_params
from .world import (
    MapConfig,
    MissionSpec,
    RunMetrics,
    WorldSpec,
    aggregate_metrics,
    generate_corridor,
    generate_forest,
    navigation_problem,
    simulate_mission,
)

PLOT_KINDS = ("rollout_cloud", "state_trace", "world_map")
NAV_COLUMNS = ("scenario", "scheme", "S_T", "S_R", "l_av", "N_lmin", "v_av", "t_mppi")
CARTPOLE_COLUMNS = ("scenario", "scheme", "S_T", "S_R", "t_conv", "ss_x", "ss_theta", "t_mppi")


class UsageError(ValueError):
    """Bad request to the experiment layer (unknown plot kind, missing artifacts)."""


class SeedMismatchError(ValueError):
    """Two configs compared against each other do not visit the same worlds."""


# -- builders ---------------------------------------------------------------


def noise_policy(cfg: ExperimentConfig):
    var = cfg.controller.noise_variance
    return GaussianNoiseSpec(var) if cfg.scheme == "mppi" else match_nln_params(var)


def controller_config(cfg: ExperimentConfig) -> ControllerConfig:
    c = cfg.controller
    return ControllerConfig(
        horizon=c.horizon, rollouts=c.rollouts, lam=c.lam, nu=c.nu, noise=noise_policy(cfg),
        sg_order=c.sg_order, sg_window=c.sg_window, clamp_before_smoothing=c.clamp_before_smoothing,
    )


def cartpole_setup(cfg: ExperimentConfig):
    s = cfg.cartpole
    model = CartpoleConfig(s.dt, s.cart_mass, s.pole_mass, s.pole_length, s.gravity, s.force_max)
    c = cfg.controller
    control = ControlCostSpec(control_weights(c.lam, c.noise_variance, c.r_scale), c.nu, c.lam)
    return model, CartpoleProblem(model, control, c.terminal_weight)


def diff_drive_model(cfg: ExperimentConfig) -> DiffDriveConfig:
    m = cfg.mission
    return DiffDriveConfig(dt=m.dt, v_max=m.v_des, omega_max=m.omega_max)


def mission_spec(cfg: ExperimentConfig) -> MissionSpec:
    m = cfg.mission
    return MissionSpec(tuple(m.start), tuple(tuple(g) for g in m.goals), m.v_des, m.pos_tol, m.yaw_tol, m.timeout)


def map_config(cfg: ExperimentConfig) -> MapConfig:
    m = cfg.map
    mode = m.mode
    if cfg.task in ("unknown_forest", "corridor"):
        mode = "sensed"
    return MapConfig(
        mode=mode,
        grid=GridParams(m.width, m.height, m.resolution),
        sensor=SensorSpec(m.max_range, math.radians(m.angular_resolution_deg), math.radians(m.fov_deg)),
        footprint=RobotFootprint(m.footprint_radius),
        inflation_radius=m.inflation_radius,
        unknown_is_lethal=m.unknown_is_lethal,
    )


def trial_seed(cfg: ExperimentConfig, trial: int) -> int:
    return cfg.seed + trial


def build_world(cfg: ExperimentConfig, trial: int) -> WorldSpec:
    seed = trial_seed(cfg, trial)
    w = cfg.world
    if cfg.task == "corridor":
        world = generate_corridor(seed, length=w.extent[0], width=w.extent[1], n_agents=w.n_agents,
                                  v_ref=w.v_ref, agent_radius=w.agent_radius, clearance=w.clearance)
        return world
    m = cfg.mission
    return generate_forest(
        w.extent, d_obs_min=w.d_obs_min, density=w.density, seed=seed, obstacle_radius=w.obstacle_radius,
        start=tuple(m.start), goal=tuple(m.goals[-1]), clearance=w.clearance,
    )


# -- cartpole ---------------------------------------------------------------


@dataclass
class CartpoleMetrics:
    success: bool
    converge_time: float
    ss_x_error: float
    ss_theta_error: float
    max_abs_force: float
    steps: int
    seed: int
    t_mppi_mean: float = float("nan")
    t_mppi_median: float = float("nan")
    t_mppi_max: float = float("nan")
    error: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def converge_time(trace: np.ndarray, dt: float, pos_tol: float, angle_tol: float) -> float:
    """First time after which the cart stays within both tolerances of the upright target.

    ``trace`` rows are ``(x, x_dot, theta, theta_dot)`` at times ``dt, 2 dt, ...``
    (the initial state excluded).  Returns ``inf`` if the last sample is
    outside the tolerances.
    """
    ok = (np.abs(trace[:, 0]) < pos_tol) & (np.abs(wrap_angle(trace[:, 2] - math.pi)) < angle_tol)
    if ok.size == 0 or not ok[-1]:
        return math.inf
    bad = np.flatnonzero(~ok)
    return dt * (bad[-1] + 2) if bad.size else dt


def simulate_cartpole(ctrl_cfg: ControllerConfig, model: CartpoleConfig, problem, section, seed: int,
                      threads: Optional[int] = None, diagnostics_path=None):
    """Closed-loop swing-up; returns ``(CartpoleMetrics, trace)``.

    ``trace`` has columns ``(t, x, x_dot, theta, theta_dot, u)``; row ``k``
    holds the state at ``t = k dt`` and the force applied from it.
    """
    ctl = MPPIController(ctrl_cfg, problem, seed=seed, threads=threads)
    steps = int(round(section.duration / model.dt))
    x = np.asarray(section.x0, dtype=float)
    rows, times = [], []
    error = ""
    diag_fh = None if diagnostics_path is None else open(diagnostics_path, "w")
    try:
        for k in range(steps):
            u, diag = ctl.control_step(x)
            times.append(diag.time_ms)
            if diag_fh is not None:
                rec = diag.as_dict()
                rec["t"] = k * model.dt
                diag_fh.write(json.dumps(rec) + "\n")
            force = float(np.clip(u[0], model.u_min[0], model.u_max[0]))
            rows.append((k * model.dt, *x, force))
            x = np.asarray(step_cartpole(x, force, model), dtype=float)
            if not np.all(np.isfinite(x)):
                raise FloatingPointError(f"non-finite cartpole state at t={k * model.dt:.2f}")
        rows.append((steps * model.dt, *x, float("nan")))
    except Exception as exc:  # noqa: BLE001 - recorded as a failed run
        error = f"{type(exc).__name__}: {exc}"
    finally:
        if diag_fh is not None:
            diag_fh.close()
    trace = np.array(rows, dtype=float).reshape(-1, 6)
    states = trace[1:, 1:5]
    t_conv = converge_time(states, model.dt, section.pos_tol, section.angle_tol) if not error else math.inf
    window = max(1, int(round(section.steady_window / model.dt)))
    tail = states[-window:] if len(states) else np.full((1, 4), np.nan)
    t = np.asarray(times) if times else np.array([np.nan])
    metrics = CartpoleMetrics(
        success=bool(not error and t_conv <= section.converge_within),
        converge_time=float(t_conv),
        ss_x_error=float(np.mean(np.abs(tail[:, 0]))),
        ss_theta_error=float(np.mean(np.abs(wrap_angle(tail[:, 2] - math.pi)))),
        max_abs_force=float(np.nanmax(np.abs(trace[:, 5]))) if len(trace) > 1 else 0.0,
        steps=len(rows) - 1,
        seed=seed,
        t_mppi_mean=float(np.mean(t)),
        t_mppi_median=float(np.median(t)),
        t_mppi_max=float(np.max(t)),
        error=error,
    )
    return metrics, trace


# -- trials -----------------------------------------------------------------


def _deterministic(metrics: dict) -> dict:
    return {k: v for k, v in metrics.items() if not k.startswith("t_mppi")}


def _timing(metrics: dict) -> dict:
    return {k: v for k, v in metrics.items() if k.startswith("t_mppi")}


def _finite_or_none(obj):
    """NaN and infinities become ``null`` so the files stay strict JSON."""
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite_or_none(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite_or_none(v) for v in obj]
    return obj


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_finite_or_none(obj), indent=2, sort_keys=True, allow_nan=False) + "\n")


def nominal_rollouts(cfg: ExperimentConfig, seed: int, threads: Optional[int] = None) -> np.ndarray:
    """Rollout states from the mission start under the constant nominal ``(v_des, 0)``."""
    ctrl_cfg = controller_config(cfg)
    model = diff_drive_model(cfg)
    problem = navigation_problem(ctrl_cfg, model, cfg.mission.goals[0], cfg.controller.terminal_weight)
    ctl = MPPIController(ctrl_cfg, problem, seed=seed, threads=threads)
    nominal = np.tile([model.v_max, 0.0], (ctrl_cfg.horizon, 1))
    batch = ctl.generate_rollouts(np.asarray(cfg.mission.start, float), nominal, seed, keep_states=True)
    return batch.trajectories


def run_trial(cfg: ExperimentConfig, trial: int, out_dir, threads: Optional[int] = None,
              save_rollouts: bool = True) -> dict:
    """One trial; writes its artifacts under ``out_dir/runs/trial_XXX`` and returns its metrics."""
    run_dir = Path(out_dir) / "runs" / f"trial_{trial:03d}"
    run_dir.mkdir(parents=True, exist_ok=True)
    seed = trial_seed(cfg, trial)
    ctrl_cfg = controller_config(cfg)
    if cfg.task == "cartpole":
        model, problem = cartpole_setup(cfg)
        metrics, trace = simulate_cartpole(ctrl_cfg, model, problem, cfg.cartpole, seed, threads,
                                           run_dir / "diagnostics.jsonl")
        with open(run_dir / "trajectory.jsonl", "w") as fh:
            for t, x, xd, th, thd, u in trace:
                fh.write(json.dumps({"t": t, "x": x, "x_dot": xd, "theta": th, "theta_dot": thd,
                                     "u": None if math.isnan(u) else u}) + "\n")
        result = metrics.to_dict()
    else:
        world = build_world(cfg, trial)
        world.to_jsonl(run_dir / "world.jsonl")
        if save_rollouts and trial == 0:
            states = nominal_rollouts(cfg, seed, threads)
            np.savez_compressed(run_dir / "rollouts.npz", states=states)
        metrics, _ = simulate_mission(
            world, mission_spec(cfg), ctrl_cfg, diff_drive_model(cfg), seed,
            map_cfg=map_config(cfg), terminal_weight=cfg.controller.terminal_weight, threads=threads,
            trajectory_path=run_dir / "trajectory.jsonl", diagnostics_path=run_dir / "diagnostics.jsonl",
        )
        result = metrics.to_dict()
    result["trial"] = trial
    _write_json(run_dir / "metrics.json", _deterministic(result))
    return result


def _run_trial_star(args):
    return run_trial(*args)


def run_trials(cfg: ExperimentConfig, out_dir, threads: Optional[int] = None, jobs: int = 1,
               save_rollouts: bool = True) -> list:
    threads = threads or default_threads()
    args = [(cfg, i, out_dir, threads, save_rollouts) for i in range(cfg.trials)]
    if jobs > 1 and cfg.trials > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_trial_star, args))
    return [run_trial(*a) for a in args]


# -- tables -----------------------------------------------------------------


def _nav_metrics(results: list) -> list:
    fields = RunMetrics.__dataclass_fields__
    return [RunMetrics(**{k: v for k, v in r.items() if k in fields}) for r in results]


def _cartpole_row(cfg: ExperimentConfig, results: list) -> dict:
    n = len(results)
    ok = [r for r in results if r["success"]]
    ss_x = [r["ss_x_error"] for r in results]
    ss_th = [r["ss_theta_error"] for r in results]
    t_mppi = [r["t_mppi_mean"] for r in results if np.isfinite(r["t_mppi_mean"])]
    return {
        "scenario": cfg.name or cfg.task,
        "scheme": cfg.scheme,
        "S_T": len(ok),
        "S_R": 100.0 * len(ok) / n if n else float("nan"),
        "t_conv": float(np.mean([r["converge_time"] for r in ok])) if ok else float("nan"),
        "ss_x": float(np.mean(ss_x)) if n else float("nan"),
        "ss_theta": float(np.mean(ss_th)) if n else float("nan"),
        "t_mppi": float(np.mean(t_mppi)) if t_mppi else float("nan"),
    }


def _nav_row(cfg: ExperimentConfig, summary: dict, n_lmin) -> dict:
    return {
        "scenario": cfg.name or cfg.task,
        "scheme": cfg.scheme,
        "S_T": summary["S_T"],
        "S_R": summary["S_R"],
        "l_av": summary["l_av"],
        "N_lmin": n_lmin,
        "v_av": summary["v_av"],
        "t_mppi": summary["t_mppi"],
    }


def _empty_nav_summary() -> dict:
    nan = float("nan")
    return {"trials": 0, "S_T": 0, "S_R": nan, "n_crash": 0, "l_av": nan, "l_sd": nan, "v_av": nan, "v_sd": nan, "t_mppi": nan}


def format_table(rows: list, columns) -> str:
    def fmt(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return "nan" if math.isnan(v) else f"{v:.3f}"
        return str(v)

    cells = [[str(c) for c in columns]] + [[fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_table(out_dir, rows: list, columns) -> None:
    out = Path(out_dir)
    (out / "table.txt").write_text(format_table(rows, columns))
    with open(out / "table.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns))
        writer.writeheader()
        for r in rows:
            writer.writerow({c: r.get(c) for c in columns})


def _save_config(cfg: ExperimentConfig, path: Path) -> None:
    path.write_text(yaml.safe_dump(cfg.raw, sort_keys=True))


def with_overrides(cfg: ExperimentConfig, seed=None, trials=None) -> ExperimentConfig:
    raw = dict(cfg.raw)
    if seed is not None:
        raw["seed"] = seed
    if trials is not None:
        raw["trials"] = trials
    return replace(cfg, seed=raw.get("seed", cfg.seed), trials=raw.get("trials", cfg.trials), raw=raw)


def run_experiment(cfg: ExperimentConfig, out_dir, *, threads: Optional[int] = None, jobs: int = 1,
                   save_rollouts: bool = True) -> dict:
    """Run every trial of ``cfg``; returns ``{"columns", "rows", "runs", "summary"}``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _save_config(cfg, out / "config.yaml")
    results = run_trials(cfg, out, threads, jobs, save_rollouts)
    if cfg.task == "cartpole":
        columns = CARTPOLE_COLUMNS
        row = _cartpole_row(cfg, results)
        summary = {k: v for k, v in row.items() if k != "t_mppi"}
    else:
        columns = NAV_COLUMNS
        summ = aggregate_metrics(_nav_metrics(results))["a"] if results else _empty_nav_summary()
        row = _nav_row(cfg, summ, None)
        summary = {k: v for k, v in summ.items() if k != "t_mppi"}
    rows = [row] if results else []
    _write_json(out / "results.json", {
        "task": cfg.task, "scheme": cfg.scheme, "seed": cfg.seed, "trials": cfg.trials,
        "runs": [_deterministic(r) for r in results], "summary": summary,
    })
    _write_json(out / "timing.json", {"runs": [{"trial": r["trial"], **_timing(r)} for r in results],
                                      "t_mppi": row["t_mppi"]})
    write_table(out, rows, columns)
    return {"columns": columns, "rows": rows, "runs": results, "summary": summary}


def compare_schemes(cfg_a: ExperimentConfig, cfg_b: ExperimentConfig, out_dir, *, threads: Optional[int] = None,
                    jobs: int = 1, save_rollouts: bool = True) -> dict:
    """Run two configs on the same worlds and build the paired table.

    ``N_lmin`` and the path-length/speed columns use only the worlds both
    schemes completed.
    """
    if cfg_a.world_key() != cfg_b.world_key():
        raise SeedMismatchError("configs A and B do not share task, seed, trials, world and mission settings")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res_a = run_experiment(cfg_a, out / "a", threads=threads, jobs=jobs, save_rollouts=save_rollouts)
    res_b = run_experiment(cfg_b, out / "b", threads=threads, jobs=jobs, save_rollouts=save_rollouts)
    if cfg_a.task == "cartpole":
        columns = CARTPOLE_COLUMNS
        rows = res_a["rows"] + res_b["rows"]
        paired = {"a": res_a["summary"], "b": res_b["summary"]}
    else:
        columns = NAV_COLUMNS
        runs_a, runs_b = _nav_metrics(res_a["runs"]), _nav_metrics(res_b["runs"])
        if runs_a:
            paired = aggregate_metrics(runs_a, runs_b)
        else:
            paired = {"a": {**_empty_nav_summary(), "N_lmin": 0}, "b": {**_empty_nav_summary(), "N_lmin": 0},
                      "joint_success": 0}
        rows = []
        if runs_a:
            rows = [_nav_row(cfg_a, paired["a"], paired["a"]["N_lmin"]),
                    _nav_row(cfg_b, paired["b"], paired["b"]["N_lmin"])]
            # success counts cover every world, not only the jointly solved ones
            rows[0]["S_T"], rows[0]["S_R"] = res_a["rows"][0]["S_T"], res_a["rows"][0]["S_R"]
            rows[1]["S_T"], rows[1]["S_R"] = res_b["rows"][0]["S_T"], res_b["rows"][0]["S_R"]
    _write_json(out / "results.json", {
        "a": cfg_a.name or cfg_a.scheme, "b": cfg_b.name or cfg_b.scheme,
        "summary": {k: ({kk: vv for kk, vv in v.items() if kk != "t_mppi"} if isinstance(v, dict) else v)
                    for k, v in paired.items()},
    })
    write_table(out, rows, columns)
    return {"columns": columns, "rows": rows, "paired": paired, "a": res_a, "b": res_b}


# -- plot data --------------------------------------------------------------


def _read_jsonl(path: Path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def rollout_cloud_rows(states: np.ndarray):
    """``(rollout, step, x, y)`` for every state of every rollout."""
    m, n1 = states.shape[:2]
    for i in range(m):
        for k in range(n1):
            yield (i, k, float(states[i, k, 0]), float(states[i, k, 1]))


def _trial_dirs(run_dir: Path) -> list:
    runs = run_dir / "runs"
    if runs.is_dir():
        return sorted(p for p in runs.iterdir() if p.is_dir())
    if (run_dir / "metrics.json").exists():
        return [run_dir]
    raise UsageError(f"{run_dir} is neither an experiment directory nor a trial directory")


def emit_plot_data(run_dir, kind: str, out_dir=None) -> list:
    """Write plain CSV plot data for every trial found under ``run_dir``.

    Kinds and columns:

    * ``rollout_cloud``: ``rollout, step, x, y`` (trials with ``rollouts.npz``)
    * ``state_trace``: cartpole ``t, x, x_dot, theta, theta_dot, u``;
      navigation ``t, x, y, theta, v, omega``
    * ``world_map``: ``x, y, r`` for every static obstacle of ``world.jsonl``
    """
    if kind not in PLOT_KINDS:
        raise UsageError(f"unknown plot-data kind {kind!r}; choose from {PLOT_KINDS}")
    run_dir = Path(run_dir)
    written = []
    for trial in _trial_dirs(run_dir):
        dest = Path(out_dir) / trial.name if out_dir is not None else trial
        dest.mkdir(parents=True, exist_ok=True)
        path = dest / f"{kind}.csv"
        if kind == "rollout_cloud":
            src = trial / "rollouts.npz"
            if not src.exists():
                continue
            with np.load(src) as data:
                states = data["states"]
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(("rollout", "step", "x", "y"))
                w.writerows((i, k, repr(x), repr(y)) for i, k, x, y in rollout_cloud_rows(states))
        elif kind == "state_trace":
            src = trial / "trajectory.jsonl"
            if not src.exists():
                continue
            recs = _read_jsonl(src)
            cols = ("t", "x", "x_dot", "theta", "theta_dot", "u") if recs and "x_dot" in recs[0] else (
                "t", "x", "y", "theta", "v", "omega")
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(cols)
                for r in recs:
                    w.writerow(["" if r.get(c) is None else repr(float(r[c])) for c in cols])
        else:
            src = trial / "world.jsonl"
            if not src.exists():
                continue
            world = WorldSpec.from_jsonl(src)
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(("x", "y", "r"))
                w.writerows((repr(float(a)), repr(float(b)), repr(float(c))) for a, b, c in world.obstacles)
        written.append(path)
    if not written:
        raise UsageError(f"no {kind} source data under {run_dir}")
    return written


def check_acceptance(cfg: ExperimentConfig, row: dict) -> list:
    """Failed acceptance checks of a result row (empty when all pass)."""
    failed = []
    acc = cfg.acceptance or {}
    if "min_success_rate" in acc:
        sr = row.get("S_R")
        if sr is None or not (sr >= float(acc["min_success_rate"])):
            failed.append(f"S_R {sr} < {acc['min_success_rate']}")
    if "max_t_mppi" in acc:
        t = row.get("t_mppi")
        if t is None or not (t <= float(acc["max_t_mppi"])):
            failed.append(f"t_mppi {t} > {acc['max_t_mppi']}")
    return failed
