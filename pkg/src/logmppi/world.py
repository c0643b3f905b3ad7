"""Benchmark worlds and the closed-loop navigation simulator.

Worlds are sets of disc obstacles (trees, boxes, wall segments) plus
optional constant-velocity agents.  :func:`simulate_mission` drives a
differential-drive robot through a :class:`MissionSpec` with an
:class:`~logmppi.controller.MPPIController`, using either the fully known
map or a grid re-sensed around the robot at every control tick.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np
from scipy.stats import qmc

from .controller import ControllerConfig, DiffDriveProblem, MPPIController
from .costmap import (
    CollisionLookup,
    GridParams,
    RobotFootprint,
    SensorSpec,
    build_from_world,
    inflate,
    world_grid,
)
from .costs import CRASH_PENALTY, ControlCostSpec, QuadraticStateCost, control_weights, navigation_q_diag
from .dynamics import ContractError, DiffDriveConfig, step_diff_drive, wrap_angle
from .sampling import GaussianNoiseSpec


class GenerationError(RuntimeError):
    """A procedural world could not satisfy its spacing or clearance constraints."""


@dataclass
class Agent:
    position: np.ndarray
    velocity: np.ndarray
    radius: float = 0.25
    #: reflection box (xmin, ymin, xmax, ymax) for the agent center
    bounds: Optional[tuple] = None

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).copy()
        self.velocity = np.asarray(self.velocity, dtype=float).copy()

    @property
    def v_ref(self) -> float:
        return float(np.hypot(*self.velocity))

    def to_dict(self) -> dict:
        return {
            "position": self.position.tolist(),
            "velocity": self.velocity.tolist(),
            "radius": self.radius,
            "bounds": None if self.bounds is None else list(self.bounds),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Agent":
        b = d.get("bounds")
        return cls(d["position"], d["velocity"], float(d.get("radius", 0.25)), None if b is None else tuple(b))


@dataclass
class WorldSpec:
    extent: tuple
    obstacles: np.ndarray
    d_obs_min: float = 0.0
    agents: list = field(default_factory=list)
    seed: Optional[int] = None
    start: Optional[tuple] = None
    goal: Optional[tuple] = None

    def __post_init__(self):
        self.extent = (float(self.extent[0]), float(self.extent[1]))
        self.obstacles = np.asarray(self.obstacles, dtype=float).reshape(-1, 3)

    def discs(self) -> np.ndarray:
        """Static obstacles followed by the agents, as ``(cx, cy, r)`` rows."""
        if not self.agents:
            return self.obstacles
        moving = np.array([[a.position[0], a.position[1], a.radius] for a in self.agents])
        return np.vstack([self.obstacles, moving])

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            head = {
                "kind": "world",
                "extent": list(self.extent),
                "d_obs_min": self.d_obs_min,
                "seed": self.seed,
                "start": None if self.start is None else list(self.start),
                "goal": None if self.goal is None else list(self.goal),
            }
            fh.write(json.dumps(head) + "\n")
            for cx, cy, r in self.obstacles:
                fh.write(json.dumps({"kind": "obstacle", "x": float(cx), "y": float(cy), "r": float(r)}) + "\n")
            for a in self.agents:
                fh.write(json.dumps({"kind": "agent", **a.to_dict()}) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "WorldSpec":
        head, obstacles, agents = None, [], []
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                kind = rec.get("kind")
                if kind == "world":
                    head = rec
                elif kind == "obstacle":
                    obstacles.append((rec["x"], rec["y"], rec["r"]))
                elif kind == "agent":
                    agents.append(Agent.from_dict(rec))
                else:
                    raise ValueError(f"unknown record kind {kind!r} in {path}")
        if head is None:
            raise ValueError(f"{path} has no world header line")
        return cls(
            tuple(head["extent"]),
            np.array(obstacles, dtype=float).reshape(-1, 3),
            float(head.get("d_obs_min", 0.0)),
            agents,
            head.get("seed"),
            None if head.get("start") is None else tuple(head["start"]),
            None if head.get("goal") is None else tuple(head["goal"]),
        )


@dataclass(frozen=True)
class MissionSpec:
    start: tuple
    goals: tuple
    v_des: float = 1.5
    pos_tol: float = 0.3
    yaw_tol: float = 0.35
    #: seconds; ``None`` means three times the straight-line time at ``v_des``
    timeout: Optional[float] = None

    def __post_init__(self):
        if self.pos_tol <= 0 or self.yaw_tol <= 0:
            raise ValueError("goal tolerances must be > 0")
        if self.v_des <= 0:
            raise ValueError("v_des must be > 0")
        if len(self.goals) == 0:
            raise ValueError("a mission needs at least one goal")
        object.__setattr__(self, "start", tuple(float(v) for v in self.start))
        object.__setattr__(self, "goals", tuple(tuple(float(v) for v in g) for g in self.goals))

    @property
    def straight_line(self) -> float:
        pts = [self.start[:2]] + [g[:2] for g in self.goals]
        return float(sum(math.dist(a, b) for a, b in zip(pts[:-1], pts[1:])))

    @property
    def time_limit(self) -> float:
        if self.timeout is not None:
            return float(self.timeout)
        return 3.0 * self.straight_line / self.v_des


@dataclass
class RunMetrics:
    success: bool
    n_crash: int
    length: float
    avg_speed: float
    duration: float
    reason: str
    t_mppi_mean: float = float("nan")
    t_mppi_median: float = float("nan")
    t_mppi_max: float = float("nan")
    steps: int = 0
    goals_reached: int = 0
    dominance_violations: int = 0
    max_speed: float = 0.0
    #: straight-line distance from the start to the final position
    displacement: float = 0.0
    world_seed: Optional[int] = None
    error: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class MapConfig:
    """How the controller perceives obstacles during a mission."""

    #: ``"known"`` rasterizes the whole world once; ``"sensed"`` re-senses every tick
    mode: str = "known"
    grid: GridParams = GridParams()
    sensor: SensorSpec = SensorSpec()
    footprint: RobotFootprint = RobotFootprint()
    #: ``None`` means footprint radius + 0.05 m
    inflation_radius: Optional[float] = None
    unknown_is_lethal: bool = False

    def __post_init__(self):
        if self.mode not in ("known", "sensed"):
            raise ValueError(f"map mode must be 'known' or 'sensed', got {self.mode!r}")

    @property
    def inflation(self) -> float:
        return self.footprint.radius + 0.05 if self.inflation_radius is None else float(self.inflation_radius)


def _clear_of(points: np.ndarray, centers: Sequence, clearance: float, radius: float) -> np.ndarray:
    keep = np.ones(len(points), dtype=bool)
    for c in centers:
        if c is None:
            continue
        keep &= np.hypot(points[:, 0] - c[0], points[:, 1] - c[1]) > clearance + radius
    return keep


def generate_forest(
    extent,
    d_obs_min: Optional[float] = None,
    density: Optional[float] = None,
    seed: int = 0,
    *,
    obstacle_radius: float = 0.15,
    start=None,
    goal=None,
    clearance: float = 1.0,
    max_tries: int = 100,
) -> WorldSpec:
    """Random disc forest over ``[0, W] x [0, H]``.

    Exactly one of ``d_obs_min`` (Poisson-disc fill with that minimum center
    spacing) or ``density`` (obstacles per square meter, placed uniformly
    without overlap) must be given.  Obstacles never intrude on the
    ``clearance`` disc around ``start`` and ``goal``.
    """
    if (d_obs_min is None) == (density is None):
        raise ValueError("give exactly one of d_obs_min or density")
    w, h = float(extent[0]), float(extent[1])
    if w <= 0 or h <= 0:
        raise ValueError("extent must be positive")
    rng = np.random.default_rng(seed)
    keep_out = [start, goal]

    if d_obs_min is not None:
        if d_obs_min <= 0:
            raise GenerationError(f"d_obs_min must be > 0, got {d_obs_min}")
        if d_obs_min < 2 * obstacle_radius:
            raise GenerationError(f"d_obs_min {d_obs_min} lets {obstacle_radius} m obstacles overlap")
        engine = qmc.PoissonDisk(2, radius=d_obs_min, l_bounds=[0.0, 0.0], u_bounds=[w, h], rng=rng)
        pts = engine.fill_space()
        pts = pts[_clear_of(pts, keep_out, clearance, obstacle_radius)]
    else:
        if density < 0:
            raise GenerationError(f"density must be >= 0, got {density}")
        target = int(round(density * w * h))
        min_gap = 2.0 * obstacle_radius
        placed: list = []
        tries = 0
        budget = max_tries * max(target, 1)
        while len(placed) < target:
            tries += 1
            if tries > budget:
                raise GenerationError(f"placed {len(placed)} of {target} obstacles after {budget} draws")
            p = rng.uniform((0.0, 0.0), (w, h))
            if not _clear_of(p[None, :], keep_out, clearance, obstacle_radius)[0]:
                continue
            if placed and np.min(np.hypot(*(np.asarray(placed) - p).T)) < min_gap:
                continue
            placed.append(p)
        pts = np.asarray(placed).reshape(-1, 2)

    obstacles = np.column_stack([pts, np.full(len(pts), obstacle_radius)])
    return WorldSpec(
        (w, h), obstacles, float(d_obs_min or 0.0), [], seed,
        None if start is None else tuple(start), None if goal is None else tuple(goal),
    )


def wall_discs(p0, p1, radius: float = 0.1, spacing: Optional[float] = None) -> np.ndarray:
    """A straight wall from ``p0`` to ``p1`` as a chain of overlapping discs."""
    spacing = radius if spacing is None else spacing
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    n = max(int(math.ceil(np.hypot(*(p1 - p0)) / spacing)), 1) + 1
    t = np.linspace(0.0, 1.0, n)[:, None]
    pts = p0 + t * (p1 - p0)
    return np.column_stack([pts, np.full(n, radius)])


def generate_corridor(
    seed: int = 0,
    *,
    length: float = 20.0,
    width: float = 6.0,
    n_agents: int = 8,
    v_ref: float = 0.3,
    agent_radius: float = 0.25,
    clearance: float = 1.0,
) -> WorldSpec:
    """Straight corridor along x with wall discs at y = 0 and y = width and walking agents."""
    rng = np.random.default_rng(seed)
    walls = np.vstack([wall_discs((0.0, 0.0), (length, 0.0)), wall_discs((0.0, width), (length, width))])
    start = (1.0, 0.5 * width, 0.0)
    goal = (length - 1.0, 0.5 * width, 0.0)
    margin = agent_radius + 0.1
    box = (0.0, margin, length, width - margin)
    agents = []
    for _ in range(n_agents):
        for _attempt in range(1000):
            p = rng.uniform((box[0] + margin, box[1]), (box[2] - margin, box[3]))
            if _clear_of(p[None, :], [start, goal], clearance, agent_radius)[0] and all(
                np.hypot(*(p - a.position)) > 2 * agent_radius for a in agents
            ):
                break
        else:
            raise GenerationError("could not place corridor agents")
        heading = rng.uniform(-math.pi, math.pi)
        agents.append(Agent(p, v_ref * np.array([math.cos(heading), math.sin(heading)]), agent_radius, box))
    return WorldSpec((length, width), walls, 0.0, agents, seed, start, goal)


def advance_agents(world: WorldSpec, dt: float) -> WorldSpec:
    """Move every agent at constant velocity for ``dt``, reflecting off its bounds."""
    moved = []
    for a in world.agents:
        pos = a.position + a.velocity * dt
        vel = a.velocity.copy()
        if a.bounds is not None:
            lo = np.array(a.bounds[:2], float)
            hi = np.array(a.bounds[2:], float)
            for i in range(2):
                if pos[i] < lo[i]:
                    pos[i] = 2 * lo[i] - pos[i]
                    vel[i] = abs(vel[i])
                elif pos[i] > hi[i]:
                    pos[i] = 2 * hi[i] - pos[i]
                    vel[i] = -abs(vel[i])
        moved.append(Agent(pos, vel, a.radius, a.bounds))
    return WorldSpec(world.extent, world.obstacles, world.d_obs_min, moved, world.seed, world.start, world.goal)


def robot_collides(world: WorldSpec, x: float, y: float, radius: float) -> bool:
    """Ground-truth crash test: robot disc against every obstacle and agent disc."""
    d = world.discs()
    if d.size == 0:
        return False
    return bool(np.any(np.hypot(d[:, 0] - x, d[:, 1] - y) < d[:, 2] + radius))


def goal_reached(state, goal, pos_tol: float, yaw_tol: float) -> bool:
    return (
        math.hypot(state[0] - goal[0], state[1] - goal[1]) <= pos_tol
        and abs(float(wrap_angle(state[2] - goal[2]))) <= yaw_tol
    )


def navigation_problem(cfg: ControllerConfig, model: DiffDriveConfig, goal, terminal_weight: float = 1.0,
                       crash_penalty: float = CRASH_PENALTY) -> DiffDriveProblem:
    """Diff-drive problem with ``R = lam * Sigma_n^(-1/2)`` from the controller's noise policy."""
    sigma2_n = cfg.noise.variance_diag if isinstance(cfg.noise, GaussianNoiseSpec) else cfg.noise.sigma2_n
    control = ControlCostSpec(control_weights(cfg.lam, sigma2_n), cfg.nu, cfg.lam)
    goal_cost = QuadraticStateCost(navigation_q_diag(model.v_max), np.asarray(goal, float))
    return DiffDriveProblem(model, goal_cost, control, terminal_weight, crash_penalty)


class _JsonlSink:
    def __init__(self, path):
        self.fh = None if path is None else open(path, "w")
        self.records: list = []

    def write(self, rec: dict) -> None:
        if self.fh is None:
            self.records.append(rec)
        else:
            self.fh.write(json.dumps(rec) + "\n")

    def close(self) -> None:
        if self.fh is not None:
            self.fh.close()


def simulate_mission(
    world: WorldSpec,
    mission: MissionSpec,
    controller_cfg: ControllerConfig,
    model_cfg: Optional[DiffDriveConfig] = None,
    seed: int = 0,
    *,
    map_cfg: MapConfig = MapConfig(),
    terminal_weight: float = 1.0,
    threads: Optional[int] = None,
    trajectory_path=None,
    diagnostics_path=None,
):
    """Run one closed-loop mission; returns ``(RunMetrics, trajectory records)``.

    Each tick: refresh the costmap snapshot, run one control step, apply the
    first control to the true robot, move the agents, then check crash, goal
    and timeout.  The trajectory records are also streamed to
    ``trajectory_path`` as JSON lines when it is given (the returned list is
    then empty).  Controller failures end the run with ``reason="error"``.
    """
    model_cfg = model_cfg or DiffDriveConfig(v_max=mission.v_des)
    dt = model_cfg.dt
    state = np.asarray(mission.start, dtype=float)
    goal_idx = 0
    problem = navigation_problem(controller_cfg, model_cfg, mission.goals[0], terminal_weight)
    ctl = MPPIController(controller_cfg, problem, seed=seed, threads=threads)
    traj = _JsonlSink(trajectory_path)
    diag_sink = _JsonlSink(diagnostics_path)

    inflation = map_cfg.inflation
    static_lookup = None
    if map_cfg.mode == "known":
        grid = inflate(world_grid(world.obstacles, world.extent, map_cfg.grid.resolution), inflation)
        static_lookup = CollisionLookup(grid, map_cfg.footprint, map_cfg.unknown_is_lethal)

    times: list = []
    length, steps, violations, max_speed = 0.0, 0, 0, 0.0
    reason, error, n_crash = "timeout", "", 0
    max_steps = int(math.ceil(mission.time_limit / dt))

    def record(u=(0.0, 0.0)):
        traj.write({
            "t": steps * dt, "x": float(state[0]), "y": float(state[1]), "theta": float(state[2]),
            "v": float(u[0]), "omega": float(u[1]), "goal": goal_idx,
        })

    def advance_goal() -> bool:
        nonlocal goal_idx
        while goal_idx < len(mission.goals) and goal_reached(state, mission.goals[goal_idx], mission.pos_tol, mission.yaw_tol):
            goal_idx += 1
        if goal_idx < len(mission.goals):
            problem.set_goal(mission.goals[goal_idx])
            return False
        return True

    record()
    done = advance_goal()
    if done:
        reason = "goal"
    try:
        while not done and steps < max_steps:
            if static_lookup is not None:
                problem.lookup = static_lookup
            else:
                sensed = build_from_world(world, state, map_cfg.grid, map_cfg.sensor)
                problem.lookup = CollisionLookup(inflate(sensed, inflation), map_cfg.footprint, map_cfg.unknown_is_lethal)
            u, diag = ctl.control_step(state)
            times.append(diag.time_ms)
            violations += 0 if diag.crash_dominance else 1
            if not np.all(np.isfinite(u)):
                raise FloatingPointError(f"non-finite control {u}")
            u = np.minimum(np.maximum(u, model_cfg.u_min), model_cfg.u_max)
            prev = state
            state = np.asarray(step_diff_drive(state, u, model_cfg), dtype=float)
            world = advance_agents(world, dt) if world.agents else world
            steps += 1
            seg = math.hypot(state[0] - prev[0], state[1] - prev[1])
            length += seg
            max_speed = max(max_speed, seg / dt)
            rec = diag.as_dict()
            rec["t"] = steps * dt
            diag_sink.write(rec)
            record(u)
            if robot_collides(world, state[0], state[1], map_cfg.footprint.radius):
                reason, n_crash = "crash", 1
                break
            if advance_goal():
                reason, done = "goal", True
    except Exception as exc:  # noqa: BLE001 - a failed run must not stop the benchmark
        reason, error = "error", f"{type(exc).__name__}: {exc}"
    finally:
        traj.close()
        diag_sink.close()

    duration = steps * dt
    t = np.asarray(times) if times else np.array([np.nan])
    metrics = RunMetrics(
        success=reason == "goal",
        n_crash=n_crash,
        length=length,
        avg_speed=length / duration if duration > 0 else 0.0,
        duration=duration,
        reason=reason,
        t_mppi_mean=float(np.mean(t)),
        t_mppi_median=float(np.median(t)),
        t_mppi_max=float(np.max(t)),
        steps=steps,
        goals_reached=goal_idx,
        dominance_violations=violations,
        max_speed=max_speed,
        displacement=math.hypot(state[0] - mission.start[0], state[1] - mission.start[1]),
        world_seed=world.seed,
        error=error,
    )
    return metrics, traj.records


def _mean_sd(values) -> tuple:
    if len(values) == 0:
        return float("nan"), float("nan")
    arr = np.asarray(values, dtype=float)
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0


def _summary(runs, gate) -> dict:
    ok = [r for r, g in zip(runs, gate) if g]
    l_av, l_sd = _mean_sd([r.length for r in ok])
    v_av, v_sd = _mean_sd([r.avg_speed for r in ok])
    t = [r.t_mppi_mean for r in runs if np.isfinite(r.t_mppi_mean)]
    n_success = sum(r.success for r in runs)
    return {
        "trials": len(runs),
        "S_T": n_success,
        "S_R": 100.0 * n_success / len(runs) if runs else float("nan"),
        "n_crash": sum(r.n_crash for r in runs),
        "l_av": l_av,
        "l_sd": l_sd,
        "v_av": v_av,
        "v_sd": v_sd,
        "t_mppi": float(np.mean(t)) if t else float("nan"),
    }


def aggregate_metrics(runs: Sequence[RunMetrics], paired: Optional[Sequence[RunMetrics]] = None) -> dict:
    """Summary of one scheme, or of two schemes run on the same worlds.

    With ``paired`` the path-length and speed statistics and ``N_lmin``
    cover only the worlds where both schemes succeeded; ``N_lmin`` counts
    strictly shorter paths, so ties score for neither scheme.
    """
    runs = list(runs)
    if paired is None:
        return {"a": _summary(runs, [r.success for r in runs])}
    paired = list(paired)
    if len(paired) != len(runs):
        raise ContractError(f"paired run lists differ in length ({len(runs)} vs {len(paired)})")
    for i, (a, b) in enumerate(zip(runs, paired)):
        if a.world_seed != b.world_seed:
            raise ContractError(f"run {i} is not paired: world seeds {a.world_seed} and {b.world_seed}")
    joint = [a.success and b.success for a, b in zip(runs, paired)]
    sa, sb = _summary(runs, joint), _summary(paired, joint)
    sa["N_lmin"] = sum(1 for a, b, j in zip(runs, paired, joint) if j and a.length < b.length)
    sb["N_lmin"] = sum(1 for a, b, j in zip(runs, paired, joint) if j and b.length < a.length)
    return {"a": sa, "b": sb, "joint_success": int(sum(joint))}
