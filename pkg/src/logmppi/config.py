"""Experiment configuration files (YAML) and their validation.

A config names a task and a scheme and carries every controller, model,
world, mission and map parameter.  Validation errors name the offending
field with its dotted path, e.g. ``controller.lambda: required field is
missing``.
"""
from __future__ import annotations

import copy
import math
from dataclasses import MISSING, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Optional

import yaml

TASKS = ("cartpole", "forest_nav", "unknown_forest", "corridor")
SCHEMES = ("mppi", "log_mppi")


class ConfigError(ValueError):
    """One or more config fields are invalid; ``errors`` lists them."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


_MISSING = object()


class _Checker:
    def __init__(self):
        self.errors: list = []

    def get(self, d: dict, key: str, path: str, kind, default=_MISSING, check=None, why: str = ""):
        where = f"{path}.{key}" if path else key
        if not isinstance(d, dict):
            self.errors.append(f"{path}: expected a mapping")
            return None if default is _MISSING else default
        if key not in d or d[key] is None:
            if default is _MISSING:
                self.errors.append(f"{where}: required field is missing")
                return None
            return default
        value = d[key]
        try:
            value = _coerce(value, kind)
        except (TypeError, ValueError):
            self.errors.append(f"{where}: expected {_kind_name(kind)}, got {value!r}")
            return None
        if check is not None and not check(value):
            self.errors.append(f"{where}: {why or 'invalid value'} (got {value!r})")
            return None
        return value


def _kind_name(kind) -> str:
    if kind == "vector":
        return "a number or list of numbers"
    if kind == "pose":
        return "a list [x, y, theta]"
    if kind == "poses":
        return "a list of [x, y, theta] poses"
    return kind.__name__


def _coerce(value, kind):
    if kind is bool:
        if not isinstance(value, bool):
            raise TypeError
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise TypeError
        return value
    if kind == "vector":
        vals = value if isinstance(value, list) else [value]
        return [_coerce(v, float) for v in vals]
    if kind == "pose":
        vals = [_coerce(v, float) for v in value]
        if len(vals) != 3:
            raise ValueError
        return vals
    if kind == "poses":
        return [_coerce(p, "pose") for p in value]
    if kind is dict:
        if not isinstance(value, dict):
            raise TypeError
        return value
    raise TypeError(kind)


def _pos(v) -> bool:
    return v > 0


def _nonneg(v) -> bool:
    return v >= 0


@dataclass
class ControllerSection:
    horizon: int
    rollouts: int
    lam: float
    nu: float
    noise_variance: list
    sg_order: int
    sg_window: Optional[int]
    r_scale: float
    clamp_before_smoothing: bool
    terminal_weight: float


@dataclass
class CartpoleSection:
    dt: float = 0.02
    cart_mass: float = 1.0
    pole_mass: float = 0.01
    pole_length: float = 1.0
    gravity: float = 9.81
    force_max: float = math.inf
    duration: float = 10.0
    x0: list = field(default_factory=lambda: [0.0, 0.0, 0.0, 0.0])
    converge_within: float = 6.0
    pos_tol: float = 0.1
    angle_tol: float = 0.1
    #: trailing window (s) over which the steady-state errors are averaged
    steady_window: float = 2.0


@dataclass
class WorldSection:
    extent: list
    d_obs_min: Optional[float] = None
    density: Optional[float] = None
    obstacle_radius: float = 0.15
    clearance: float = 1.0
    n_agents: int = 8
    v_ref: float = 0.3
    agent_radius: float = 0.25


@dataclass
class MissionSection:
    start: list
    goals: list
    v_des: float = 1.5
    omega_max: float = 2.0
    dt: float = 0.02
    pos_tol: float = 0.3
    yaw_tol: float = 0.35
    timeout: Optional[float] = None


@dataclass
class MapSection:
    mode: str = "known"
    width: int = 240
    height: int = 240
    resolution: float = 0.05
    max_range: float = 8.0
    angular_resolution_deg: float = 0.25
    fov_deg: float = 360.0
    footprint_radius: float = 0.3
    inflation_radius: Optional[float] = None
    unknown_is_lethal: bool = False


@dataclass
class ExperimentConfig:
    task: str
    scheme: str
    trials: int
    seed: int
    controller: ControllerSection
    cartpole: Optional[CartpoleSection] = None
    world: Optional[WorldSection] = None
    mission: Optional[MissionSection] = None
    map: Optional[MapSection] = None
    #: acceptance thresholds checked by ``run --acceptance``
    acceptance: dict = field(default_factory=dict)
    name: str = ""
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def is_navigation(self) -> bool:
        return self.task != "cartpole"

    def world_key(self) -> dict:
        """Everything that determines the sequence of worlds a run visits."""
        return {"task": self.task, "seed": self.seed, "trials": self.trials, "world": self.raw.get("world"),
                "mission": self.raw.get("mission")}


def _section(ck: _Checker, raw: dict, key: str, cls, required: dict, optional: dict, may_omit: bool = False):
    d = raw.get(key)
    if d is None and may_omit:
        d = {}
    if d is None:
        ck.errors.append(f"{key}: required section is missing")
        return None
    if not isinstance(d, dict):
        ck.errors.append(f"{key}: expected a mapping")
        return None
    known = set(required) | set(optional)
    for extra in sorted(set(d) - known):
        ck.errors.append(f"{key}.{extra}: unknown field")
    values = {}
    for name, (kind, check, why) in required.items():
        values[name] = ck.get(d, name, key, kind, check=check, why=why)
    defaults = cls.__dataclass_fields__
    for name, (kind, check, why) in optional.items():
        f = defaults[name]
        default = f.default if f.default is not MISSING else f.default_factory()  # type: ignore[misc]
        values[name] = ck.get(d, name, key, kind, default=default, check=check, why=why)
    return values


def parse_config(raw: Any, name: str = "") -> ExperimentConfig:
    """Validate a config mapping; raises :class:`ConfigError` listing every bad field."""
    ck = _Checker()
    if not isinstance(raw, dict):
        raise ConfigError(["<root>: expected a mapping"])
    allowed = {"task", "scheme", "trials", "seed", "controller", "cartpole", "world", "mission", "map", "acceptance", "name"}
    for extra in sorted(set(raw) - allowed):
        ck.errors.append(f"{extra}: unknown field")
    task = ck.get(raw, "task", "", str, check=lambda v: v in TASKS, why=f"must be one of {TASKS}")
    scheme = ck.get(raw, "scheme", "", str, check=lambda v: v in SCHEMES, why=f"must be one of {SCHEMES}")
    trials = ck.get(raw, "trials", "", int, default=1, check=_nonneg, why="must be >= 0")
    seed = ck.get(raw, "seed", "", int, default=0, check=_nonneg, why="must be >= 0")
    acceptance = ck.get(raw, "acceptance", "", dict, default={})

    c = raw.get("controller")
    ctrl = None
    if c is None:
        ck.errors.append("controller: required section is missing")
    elif not isinstance(c, dict):
        ck.errors.append("controller: expected a mapping")
    else:
        for extra in sorted(set(c) - {"horizon", "rollouts", "lambda", "nu", "noise_variance", "sg_order", "sg_window",
                                      "r_scale", "clamp_before_smoothing", "terminal_weight"}):
            ck.errors.append(f"controller.{extra}: unknown field")
        horizon = ck.get(c, "horizon", "controller", int, check=_pos, why="must be >= 1")
        sg_window = ck.get(c, "sg_window", "controller", int, default=None,
                           check=lambda v: v % 2 == 1 and v > 0, why="must be odd and positive")
        sg_order = ck.get(c, "sg_order", "controller", int, default=3, check=_nonneg, why="must be >= 0")
        if sg_window is not None and sg_order is not None and sg_window <= sg_order:
            ck.errors.append(f"controller.sg_window: must be larger than sg_order (got {sg_window} <= {sg_order})")
        if sg_window is not None and horizon is not None and (sg_window - 1) // 2 > horizon - 1:
            ck.errors.append(f"controller.sg_window: {sg_window} is too long for horizon {horizon}")
        ctrl = ControllerSection(
            horizon=horizon,
            rollouts=ck.get(c, "rollouts", "controller", int, check=_pos, why="must be >= 1"),
            lam=ck.get(c, "lambda", "controller", float, check=_pos, why="must be > 0"),
            nu=ck.get(c, "nu", "controller", float, check=_pos, why="must be > 0"),
            noise_variance=ck.get(c, "noise_variance", "controller", "vector",
                                  check=lambda v: len(v) > 0 and all(x > 0 for x in v), why="entries must be > 0"),
            sg_order=sg_order,
            sg_window=sg_window,
            r_scale=ck.get(c, "r_scale", "controller", float, default=1.0, check=_pos, why="must be > 0"),
            clamp_before_smoothing=ck.get(c, "clamp_before_smoothing", "controller", bool, default=False),
            terminal_weight=ck.get(c, "terminal_weight", "controller", float,
                                   default=0.0 if task == "cartpole" else 1.0, check=_nonneg, why="must be >= 0"),
        )

    cart = world = mission = mapc = None
    pos = (_pos, "must be > 0")
    if task == "cartpole":
        v = _section(ck, raw, "cartpole", CartpoleSection, {}, {
            "dt": (float, *pos), "cart_mass": (float, *pos), "pole_mass": (float, *pos),
            "pole_length": (float, *pos), "gravity": (float, _nonneg, "must be >= 0"),
            "force_max": (float, *pos), "duration": (float, *pos),
            "x0": ("vector", lambda x: len(x) == 4, "must have 4 entries"),
            "converge_within": (float, *pos), "pos_tol": (float, *pos), "angle_tol": (float, *pos),
            "steady_window": (float, *pos),
        }, may_omit=True)
        if v is not None:
            cart = CartpoleSection(**v)
        if ctrl is not None and ctrl.noise_variance is not None and len(ctrl.noise_variance) != 1:
            ck.errors.append("controller.noise_variance: cartpole has one control channel")
    elif task in TASKS:
        v = _section(ck, raw, "world", WorldSection,
                     {"extent": ("vector", lambda x: len(x) == 2 and min(x) > 0, "must be two positive lengths")},
                     {"d_obs_min": (float, *pos), "density": (float, _nonneg, "must be >= 0"),
                      "obstacle_radius": (float, *pos), "clearance": (float, _nonneg, "must be >= 0"),
                      "n_agents": (int, _nonneg, "must be >= 0"), "v_ref": (float, _nonneg, "must be >= 0"),
                      "agent_radius": (float, *pos)})
        if v is not None:
            world = WorldSection(**v)
            if task != "corridor" and (world.d_obs_min is None) == (world.density is None):
                ck.errors.append("world.d_obs_min: give exactly one of world.d_obs_min or world.density")
        v = _section(ck, raw, "mission", MissionSection,
                     {"start": ("pose", None, ""), "goals": ("poses", lambda g: len(g) > 0, "needs at least one goal")},
                     {"v_des": (float, *pos), "omega_max": (float, *pos), "dt": (float, *pos),
                      "pos_tol": (float, *pos), "yaw_tol": (float, *pos), "timeout": (float, *pos)})
        if v is not None:
            mission = MissionSection(**v)
        v = _section(ck, raw, "map", MapSection, {}, {
            "mode": (str, lambda m: m in ("known", "sensed"), "must be 'known' or 'sensed'"),
            "width": (int, *pos), "height": (int, *pos), "resolution": (float, *pos),
            "max_range": (float, *pos), "angular_resolution_deg": (float, *pos),
            "fov_deg": (float, lambda f: 0 < f <= 360, "must be in (0, 360]"),
            "footprint_radius": (float, *pos), "inflation_radius": (float, _nonneg, "must be >= 0"),
            "unknown_is_lethal": (bool, None, ""),
        }, may_omit=True)
        if v is not None:
            mapc = MapSection(**v)
        if ctrl is not None and ctrl.noise_variance is not None and len(ctrl.noise_variance) != 2:
            ck.errors.append("controller.noise_variance: the differential drive has two control channels")

    if ck.errors:
        raise ConfigError(ck.errors)
    return ExperimentConfig(task, scheme, trials, seed, ctrl, cart, world, mission, mapc, acceptance,
                            str(raw.get("name", name)), copy.deepcopy(raw))


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    try:
        raw = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError([f"<file>: not valid YAML ({exc})"]) from exc
    return parse_config(raw, p.stem)


def preset_names() -> list:
    return sorted(f.name[:-5] for f in resources.files("logmppi.presets").iterdir() if f.name.endswith(".yaml"))


def load_preset(name: str) -> ExperimentConfig:
    """Bundled config by name, e.g. ``"cartpole_log_mppi"``."""
    f = resources.files("logmppi.presets") / f"{name}.yaml"
    if not f.is_file():
        raise ConfigError([f"<preset>: no preset named {name!r} (have {preset_names()})"])
    return parse_config(yaml.safe_load(f.read_text()), name)


def resolve_config(ref: str) -> ExperimentConfig:
    """A path to a YAML file, or the name of a bundled preset."""
    p = Path(ref)
    if p.suffix in (".yaml", ".yml") or p.exists():
        return load_config(p)
    return load_preset(ref)
