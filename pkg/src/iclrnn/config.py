"""Run configuration: JSON file -> nested dataclasses with defaults.

Unknown keys are rejected with the dotted path of the offending key.
Relative paths inside the config resolve against the run's output
directory, so a pipeline can chain ``gen-cstr -> train -> mpc`` in one
directory with the default file names.
"""

import dataclasses
import json
import typing
from dataclasses import dataclass, field

from .errors import ConfigError


@dataclass
class ProjectionSection:
    power_iters: int = 50
    power_tol: float = 1e-9
    bjorck_iters: int = 25
    bjorck_beta: float = 0.5


@dataclass
class NetSection:
    hidden_dims: list = field(default_factory=lambda: [64, 64])
    rollout_steps: int = 1
    output_activation: str = "linear"
    constraint_mode: str = "convex_lipschitz"
    projection: ProjectionSection = field(default_factory=ProjectionSection)


@dataclass
class CstrSection:
    count: int = 20000
    rollout: int = 1
    u_bounds: list = field(default_factory=lambda: [[-3.5, 3.5], [-500000.0, 500000.0]])
    delta: float = 0.005
    h_c: float = 0.0001
    guard: list = field(default_factory=lambda: [5.0, 200.0])
    dataset: str = "dataset.csv"


@dataclass
class TrainSection:
    dataset: str = "dataset.csv"
    checkpoint: str = "model.npz"
    epochs: int = 60
    batch_size: int = 32
    lr: float = 0.001
    lr_decay: float = 0.97
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    val_fraction: float = 0.2


@dataclass
class EvalSection:
    checkpoint: str = "model.npz"
    test_dataset: str = ""
    test_count: int = 5000


@dataclass
class CheckSection:
    checkpoint: str = ""
    samples: int = 10000
    tol: float = 1e-6
    pairs: int = 2000
    domain_halfwidth: float = 3.0


@dataclass
class NoiseSection:
    checkpoint: str = "model.npz"
    sigmas: list = field(default_factory=lambda: [0.0, 0.01, 0.02, 0.05, 0.1, 0.2])
    trials: int = 5
    test_count: int = 5000


@dataclass
class MpcSection:
    checkpoint: str = "model.npz"
    initial_conditions: list = field(default_factory=lambda: [[-1.5, 70.0], [1.5, -70.0], [-1.25, 50.0], [1.25, -50.0]])
    N: int = 2
    kappa: float = 0.01
    max_periods: int = 100
    starts: int = 4
    max_iters: int = 150
    Qx: list = field(default_factory=lambda: [[1060.0, 22.0], [22.0, 0.52]])
    Ru: list = field(default_factory=lambda: [[1.0, 0.0], [0.0, 1e-11]])
    lyapunov_constraint: bool = True


@dataclass
class ForecastSection:
    data: str = "forecast.csv"
    checkpoint: str = "forecast_model.npz"
    days: int = 30
    start: str = "2023-01-01"
    lookback: int = 2
    max_gap_minutes: float = 1.0
    train_end: str = ""
    val_end: str = ""
    train_fraction: float = 0.7
    val_fraction: float = 0.15
    hidden_dims: list = field(default_factory=lambda: [32, 32])
    constraint_mode: str = "convex_lipschitz"
    epochs: int = 15
    batch_size: int = 64
    lr: float = 0.003
    lr_decay: float = 0.85


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    threads: int = 1
    plot: bool = False
    cstr: CstrSection = field(default_factory=CstrSection)
    net: NetSection = field(default_factory=NetSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    check: CheckSection = field(default_factory=CheckSection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    mpc: MpcSection = field(default_factory=MpcSection)
    forecast: ForecastSection = field(default_factory=ForecastSection)


def _coerce(value, tp, path):
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return _build(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    if tp is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        return value
    return value


def _build(cls, data, prefix=""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            where = f"{prefix}.{key}" if prefix else key
            raise ConfigError(f"unknown config key {where!r}")
    kwargs = {}
    for name in names:
        if name in data:
            kwargs[name] = _coerce(data[name], hints[name], f"{prefix}.{name}" if prefix else name)
    return cls(**kwargs)


def config_from_dict(data):
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    cfg = _build(RunConfig, data)
    _validate(cfg)
    return cfg


def _validate(cfg):
    from .model import ConstraintMode

    for mode in (cfg.net.constraint_mode, cfg.forecast.constraint_mode):
        try:
            ConstraintMode(mode)
        except ValueError:
            raise ConfigError(f"unknown constraint_mode {mode!r}") from None
    if cfg.net.output_activation not in ("linear", "softmax"):
        raise ConfigError(f"net.output_activation: unknown activation {cfg.net.output_activation!r}")
    positive = {
        "cstr.count": cfg.cstr.count, "cstr.rollout": cfg.cstr.rollout, "net.rollout_steps": cfg.net.rollout_steps,
        "train.epochs": cfg.train.epochs, "train.batch_size": cfg.train.batch_size, "noise.trials": cfg.noise.trials,
        "mpc.N": cfg.mpc.N, "mpc.max_periods": cfg.mpc.max_periods, "mpc.starts": cfg.mpc.starts,
        "forecast.days": cfg.forecast.days, "forecast.lookback": cfg.forecast.lookback, "threads": cfg.threads,
        "check.samples": cfg.check.samples, "check.pairs": cfg.check.pairs,
    }
    for key, v in positive.items():
        if v < 1:
            raise ConfigError(f"{key} must be >= 1")
    if not cfg.net.hidden_dims or any((not isinstance(h, int)) or h < 1 for h in cfg.net.hidden_dims):
        raise ConfigError("net.hidden_dims must be a non-empty list of positive integers")
    if cfg.seed < 0:
        raise ConfigError("seed must be non-negative")


def parse_config(path):
    """Load and validate a JSON config; missing file raises ``OSError``."""
    with open(path) as fh:
        text = fh.read()
    try:
        data = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return config_from_dict(data)


def config_to_dict(cfg):
    return dataclasses.asdict(cfg)


def dump_config(cfg, path):
    with open(path, "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
