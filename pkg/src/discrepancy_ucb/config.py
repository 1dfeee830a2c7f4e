"""Campaign configuration files.

Configs are YAML documents validated against the dataclasses below. Unknown
keys, wrong types and out-of-range values raise :class:`ConfigError` carrying
the offending line number.
"""

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import yaml

from .env import Environment, LinearGridEnv, PendulumEnv, PendulumParams
from .episodic import METHODS, SCHEDULES, Campaign, PlannerSettings, ScheduleConfig, derive_seed
from .gp import RBFKernel
from .planner import NORMS, AcquisitionConfig, BoxSafeSet, CemConfig


class ConfigError(ValueError):
    def __init__(self, message: str, source: str = "<config>", line: Optional[int] = None):
        self.source = source
        self.line = line
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")


@dataclass
class PendulumParamsConfig:
    g: float = 9.81
    m: float = 1.0
    l: float = 1.0


@dataclass
class EnvConfig:
    name: str = "pendulum"
    dt: float = 0.05
    noise_std: float = 0.01
    true_params: PendulumParamsConfig = field(default_factory=PendulumParamsConfig)
    prior_params: PendulumParamsConfig = field(default_factory=lambda: PendulumParamsConfig(9.0, 0.5, 2.0))
    grid_counts: List[int] = field(default_factory=lambda: [20, 20, 20])
    state_grid_counts: List[int] = field(default_factory=lambda: [20, 20])
    assumption_grid_counts: Optional[List[int]] = field(default_factory=lambda: [6, 6, 5])
    A: Optional[List[List[float]]] = None
    B: Optional[List[List[float]]] = None
    prior_A: Optional[List[List[float]]] = None
    prior_B: Optional[List[List[float]]] = None
    state_values: Optional[List[List[float]]] = None
    action_values: Optional[List[List[float]]] = None


@dataclass
class GpConfig:
    gamma: float = 0.5
    schedule: str = "experiment"
    fixed_value: float = 0.01
    episode_length: int = 10


@dataclass
class CemSection:
    horizon: int = 10
    iterations: int = 10
    samples: int = 50
    elites: int = 10
    kept_elites: int = 5
    init_std: Optional[float] = None
    min_std: float = 0.05
    noise_beta: float = 2.0
    momentum: float = 0.1


@dataclass
class SafeSetConfig:
    lower: List[float] = field(default_factory=list)
    upper: List[float] = field(default_factory=list)


@dataclass
class AcquisitionSection:
    beta: float = 2.0
    beta_schedule: str = "constant"
    norm: str = "l2"
    safe_set: Optional[SafeSetConfig] = None


@dataclass
class PlannerConfig:
    cem: CemSection = field(default_factory=CemSection)
    acquisition: AcquisitionSection = field(default_factory=AcquisitionSection)
    greedy_candidates: int = 21
    reset_probe: str = "zero"


@dataclass
class ControlConfig:
    steps: int = 200
    x0: List[float] = field(default_factory=lambda: [float(np.pi), 0.0])
    seed: int = 0
    cem: CemSection = field(default_factory=lambda: CemSection(samples=200, elites=50, kept_elites=15))


@dataclass
class TheoremConfig:
    eps: List[float] = field(default_factory=lambda: [0.5, 0.25, 0.1])


@dataclass
class CampaignConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    method: str = "discrepancy_ucb"
    gp: GpConfig = field(default_factory=GpConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    control: ControlConfig = field(default_factory=ControlConfig)
    theorem: Optional[TheoremConfig] = None
    episodes: int = 30
    trials: int = 10
    master_seed: int = 0
    output_dir: str = "output"
    record_timing: bool = False

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """Digest of every setting that can change results (``output_dir`` excluded)."""
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


# --------------------------------------------------------------------------
# Parsing
# --------------------------------------------------------------------------


def _line_map(text: str) -> dict:
    """Map key paths (tuples) to 1-based line numbers."""
    lines: dict = {}

    def walk(node, path):
        lines.setdefault(path, node.start_mark.line + 1)
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                key_path = path + (k.value,)
                lines[key_path] = k.start_mark.line + 1
                walk(v, key_path)
        elif isinstance(node, yaml.SequenceNode):
            for i, item in enumerate(node.value):
                walk(item, path + (i,))

    root = yaml.compose(text)
    if root is not None:
        walk(root, ())
    return lines


class _Parser:
    def __init__(self, source: str, lines: dict):
        self.source = source
        self.lines = lines

    def fail(self, path: tuple, message: str):
        line = None
        for i in range(len(path), -1, -1):
            if path[:i] in self.lines:
                line = self.lines[path[:i]]
                break
        dotted = ".".join(str(p) for p in path) or "<root>"
        raise ConfigError(f"{dotted}: {message}", self.source, line)

    def convert(self, tp, value, path):
        origin = typing.get_origin(tp)
        if origin is typing.Union:
            args = [a for a in typing.get_args(tp) if a is not type(None)]
            if value is None:
                return None
            return self.convert(args[0], value, path)
        if origin in (list, List):
            (item_tp,) = typing.get_args(tp)
            if not isinstance(value, list):
                self.fail(path, f"expected a list, got {type(value).__name__}")
            return [self.convert(item_tp, v, path + (i,)) for i, v in enumerate(value)]
        if dataclasses.is_dataclass(tp):
            return self.section(tp, value, path)
        if value is None:
            self.fail(path, "value must not be empty")
        if tp is bool:
            if not isinstance(value, bool):
                self.fail(path, f"expected true/false, got {value!r}")
            return value
        if tp is int:
            if isinstance(value, bool) or not isinstance(value, int):
                self.fail(path, f"expected an integer, got {value!r}")
            return value
        if tp is float:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                self.fail(path, f"expected a number, got {value!r}")
            return float(value)
        if tp is str:
            if not isinstance(value, str):
                self.fail(path, f"expected a string, got {value!r}")
            return value
        self.fail(path, f"unsupported field type {tp}")

    def section(self, cls, mapping, path):
        if mapping is None:
            mapping = {}
        if not isinstance(mapping, dict):
            self.fail(path, f"expected a mapping, got {type(mapping).__name__}")
        hints = typing.get_type_hints(cls)
        known = {f.name for f in dataclasses.fields(cls)}
        for key in mapping:
            if key not in known:
                self.fail(path + (key,), f"unknown key {key!r} (expected one of {sorted(known)})")
        kwargs = {k: self.convert(hints[k], v, path + (k,)) for k, v in mapping.items()}
        return cls(**kwargs)


def _check(p: _Parser, cond: bool, path: tuple, message: str):
    if not cond:
        p.fail(path, message)


def _validate(cfg: CampaignConfig, p: _Parser):
    _check(p, cfg.method in METHODS, ("method",), f"method must be one of {list(METHODS)}")
    _check(p, cfg.episodes >= 1, ("episodes",), "episodes must be at least 1")
    _check(p, cfg.trials >= 1, ("trials",), "trials must be at least 1")
    _check(p, cfg.master_seed >= 0, ("master_seed",), "master_seed must be non-negative")
    e = cfg.env
    _check(p, e.name in ("pendulum", "linear_grid"), ("env", "name"), "env.name must be 'pendulum' or 'linear_grid'")
    _check(p, e.noise_std >= 0, ("env", "noise_std"), "noise_std must be non-negative")
    if e.name == "pendulum":
        _check(p, e.dt > 0, ("env", "dt"), "dt must be positive")
        for key in ("true_params", "prior_params"):
            par = getattr(e, key)
            _check(p, par.m > 0 and par.l > 0, ("env", key), "pendulum mass and length must be positive")
        _check(p, len(e.grid_counts) == 3 and min(e.grid_counts) >= 2, ("env", "grid_counts"),
               "grid_counts needs three entries, each at least 2")
        _check(p, len(e.state_grid_counts) == 2 and min(e.state_grid_counts) >= 2, ("env", "state_grid_counts"),
               "state_grid_counts needs two entries, each at least 2")
        if e.assumption_grid_counts is not None:
            _check(p, len(e.assumption_grid_counts) == 3 and min(e.assumption_grid_counts) >= 2,
                   ("env", "assumption_grid_counts"), "assumption_grid_counts needs three entries, each at least 2")
    else:
        for key in ("A", "B", "state_values", "action_values"):
            _check(p, getattr(e, key) is not None, ("env", key), f"linear_grid env requires '{key}'")
        try:
            build_env(cfg)
        except ValueError as exc:
            p.fail(("env",), str(exc))
    g = cfg.gp
    _check(p, g.gamma > 0, ("gp", "gamma"), "gamma must be positive")
    _check(p, g.schedule in SCHEDULES, ("gp", "schedule"), f"schedule must be one of {list(SCHEDULES)}")
    _check(p, g.fixed_value > 0, ("gp", "fixed_value"), "fixed_value must be positive")
    _check(p, g.episode_length >= 1, ("gp", "episode_length"), "episode_length must be at least 1")
    for path, section in ((("planner", "cem"), cfg.planner.cem), (("control", "cem"), cfg.control.cem)):
        try:
            CemConfig(**dataclasses.asdict(section))
        except ValueError as exc:
            p.fail(path, str(exc))
    a = cfg.planner.acquisition
    _check(p, a.beta >= 0, ("planner", "acquisition", "beta"), "beta must be non-negative")
    _check(p, a.beta_schedule in ("constant", "log"), ("planner", "acquisition", "beta_schedule"),
           "beta_schedule must be 'constant' or 'log'")
    _check(p, a.norm in NORMS, ("planner", "acquisition", "norm"), f"norm must be one of {list(NORMS)}")
    _check(p, cfg.planner.greedy_candidates >= 1, ("planner", "greedy_candidates"), "greedy_candidates must be at least 1")
    _check(p, cfg.planner.reset_probe in ("zero", "actions"), ("planner", "reset_probe"),
           "reset_probe must be 'zero' or 'actions'")
    _check(p, cfg.control.steps >= 1, ("control", "steps"), "control.steps must be at least 1")
    if cfg.theorem is not None:
        _check(p, len(cfg.theorem.eps) > 0 and all(x > 0 for x in cfg.theorem.eps), ("theorem", "eps"),
               "theorem.eps must be a non-empty list of positive numbers")


def parse_config(text: str, source: str = "<config>") -> CampaignConfig:
    try:
        data = yaml.safe_load(text)
        lines = _line_map(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"invalid YAML: {getattr(exc, 'problem', exc)}", source,
                          mark.line + 1 if mark else None) from exc
    p = _Parser(source, lines)
    cfg = p.section(CampaignConfig, data, ())
    _validate(cfg, p)
    return cfg


def load_config(path) -> CampaignConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from exc
    return parse_config(text, str(path))


# --------------------------------------------------------------------------
# Runtime objects
# --------------------------------------------------------------------------


def build_env(cfg: CampaignConfig) -> Environment:
    e = cfg.env
    if e.name == "pendulum":
        return PendulumEnv(PendulumParams(**dataclasses.asdict(e.true_params)),
                           PendulumParams(**dataclasses.asdict(e.prior_params)), dt=e.dt)
    return LinearGridEnv(e.A, e.B, e.state_values, e.action_values, e.prior_A, e.prior_B)


def cem_config(section: CemSection) -> CemConfig:
    return CemConfig(**dataclasses.asdict(section))


def planner_settings(cfg: CampaignConfig) -> PlannerSettings:
    a = cfg.planner.acquisition
    safe = BoxSafeSet(tuple(a.safe_set.lower), tuple(a.safe_set.upper)) if a.safe_set else None
    acq = AcquisitionConfig(beta=a.beta, beta_schedule=a.beta_schedule, discrepancy_norm=a.norm, safe_set=safe)
    return PlannerSettings(method=cfg.method, cem=cem_config(cfg.planner.cem), acquisition=acq,
                           greedy_candidates=cfg.planner.greedy_candidates)


def trial_seed(cfg: CampaignConfig, trial: int) -> int:
    return derive_seed(cfg.master_seed, trial)


def build_campaign(cfg: CampaignConfig, trial: int, env: Optional[Environment] = None) -> Campaign:
    env = env or build_env(cfg)
    finite = getattr(env, "finite", False)
    e = cfg.env
    if finite:
        test_grid = assumption_grid = env.points
        state_grid = env.states
    else:
        test_grid = env.test_grid(e.grid_counts)
        state_grid = env.state_grid(e.state_grid_counts)
        assumption_grid = env.test_grid(e.assumption_grid_counts) if e.assumption_grid_counts else None
    if cfg.planner.reset_probe == "actions":
        probes = env.actions if finite else np.linspace(env.spec.action_low, env.spec.action_high,
                                                        cfg.planner.greedy_candidates)
    else:
        probes = None
    return Campaign(
        env=env, settings=planner_settings(cfg),
        schedule=ScheduleConfig(kind=cfg.gp.schedule, fixed_value=cfg.gp.fixed_value,
                                episode_length=cfg.gp.episode_length),
        kernel=RBFKernel(cfg.gp.gamma, env.spec.kernel_wrap_mask),
        episodes=cfg.episodes, test_grid=test_grid, state_grid=state_grid,
        seed=trial_seed(cfg, trial), noise_std=e.noise_std, reset_probes=probes,
        assumption_grid=assumption_grid, memo_size=4096 if finite else 0,
        norm=cfg.planner.acquisition.norm,
    )
