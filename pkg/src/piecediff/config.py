"""Run configuration: nested dataclasses loaded from YAML with dotted overrides."""

import dataclasses
import typing
from dataclasses import dataclass, field

import yaml

from .denoiser import DenoiserConfig
from .encoders import EncoderConfig
from .errors import ConfigError
from .graph import SparsifierConfig

TASKS = ("puzzle2d", "frag3d")


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 300
    beta_start: float = 1e-4
    beta_end: float = 0.02
    stride: int = 1
    stochastic: bool = False
    rotation_step: str = "posterior"  # or "printed"

    def __post_init__(self):
        if self.rotation_step not in ("posterior", "printed"):
            raise ConfigError("rotation_step must be 'posterior' or 'printed'")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")


@dataclass(frozen=True)
class GraphConfig:
    sparse: bool = False
    sparsifier: SparsifierConfig = field(default_factory=SparsifierConfig)
    resample_each_step: bool = True


@dataclass(frozen=True)
class OptimConfig:
    algorithm: str = "adagrad"
    lr: float = 1e-4

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.algorithm not in ("adagrad", "adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.algorithm!r}")


@dataclass(frozen=True)
class LossWeights:
    w_tr: float = 1.0
    w_rt: float = 1.0
    w_cd: float = 0.0

    def __post_init__(self):
        if min(self.w_tr, self.w_rt, self.w_cd) < 0:
            raise ConfigError("loss weights must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    patience: int = 20
    min_delta: float = 1e-4
    batch_size: int = 8
    max_minutes: typing.Optional[float] = None
    seed: int = 0
    log_every: int = 10


@dataclass(frozen=True)
class DataConfig:
    num_images: int = 50
    sizes: tuple = (2, 3, 4)
    image_size: int = 48
    rotate: bool = True
    missing: float = 0.0
    num_objects: int = 20
    pieces: tuple = (2, 3, 4)
    seed: int = 0


@dataclass(frozen=True)
class EvalConfig:
    seeds: tuple = (0, 1, 2, 3, 4)
    missing: float = 0.0


@dataclass(frozen=True)
class BenchConfig:
    sizes: tuple = (16, 64, 144, 324, 576, 900)
    patch: int = 8
    steps: int = 10
    repeats: int = 5


@dataclass(frozen=True)
class RunConfig:
    task: str = "puzzle2d"
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}")

    @property
    def dim(self):
        return 2 if self.task == "puzzle2d" else 3

    def to_dict(self):
        return to_dict(self)


def to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [to_dict(v) for v in obj]
    return obj


def from_dict(cls, data):
    """Build a (nested) config dataclass from a plain dict; unknown keys are rejected."""
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping for {cls.__name__}, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    for key, val in data.items():
        tp = hints[key]
        if dataclasses.is_dataclass(tp):
            kwargs[key] = from_dict(tp, val)
        elif tp is tuple or typing.get_origin(tp) is tuple:
            kwargs[key] = tuple(val)
        else:
            kwargs[key] = val
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _set_dotted(d, dotted, value):
    keys = dotted.split(".")
    cur = d
    for k in keys[:-1]:
        cur = cur.setdefault(k, {})
        if not isinstance(cur, dict):
            raise ConfigError(f"override {dotted!r} descends into a scalar")
    cur[keys[-1]] = value


def _apply(data, overrides):
    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(f"override must look like key=value, got {ov!r}")
        k, v = ov.split("=", 1)
        _set_dotted(data, k.strip(), yaml.safe_load(v))
    return from_dict(RunConfig, data)


def with_overrides(cfg, overrides):
    """Copy of ``cfg`` with dotted ``key=value`` overrides applied."""
    return _apply(cfg.to_dict(), overrides)


def load_config(path=None, overrides=()):
    """Read a YAML config and apply ``key.sub=value`` overrides (values parsed as YAML)."""
    data = {}
    if path:
        try:
            with open(path) as fh:
                data = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a mapping")
    return _apply(data, overrides)


def save_config(cfg, path):
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
