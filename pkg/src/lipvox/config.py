"""Run configuration: dataclasses with documented defaults plus a TOML loader
that rejects unknown keys."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .embedders import SurrogateConfig
from .losses import LossWeights

SAMPLING_SOURCES = ("content", "lip", "alternate")
CROP_MODES = ("full_face", "lower_half")
SEED_ENV = "LIPVOX_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 5e-5
    critic_iters_per_gen: int = 5
    sampling_source: str = "content"
    variational: bool = True
    crop_mode: str = "full_face"
    weights: LossWeights = field(default_factory=LossWeights)
    patience_epochs: int = 10
    min_improvement: float = 1e-4
    seed: int = 0
    max_epochs: int = 100
    max_steps: int | None = None
    rmsprop_alpha: float = 0.9
    rmsprop_momentum: float = 0.0
    kl_order: str = "content_lip"
    local_segments: int = 10
    local_min_len: int = 5
    local_max_len: int = 20
    keep_epoch_checkpoints: bool = False

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.sampling_source not in SAMPLING_SOURCES:
            raise ConfigError(f"sampling_source must be one of {SAMPLING_SOURCES}, got {self.sampling_source!r}")
        if self.crop_mode not in CROP_MODES:
            raise ConfigError(f"crop_mode must be one of {CROP_MODES}, got {self.crop_mode!r}")
        if self.kl_order not in ("content_lip", "lip_content"):
            raise ConfigError(f"kl_order must be 'content_lip' or 'lip_content', got {self.kl_order!r}")
        for name in ("batch_size", "critic_iters_per_gen", "patience_epochs", "max_epochs", "local_segments"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return build(cls, data, "train")


@dataclass
class CorpusConfig:
    speakers: int = 4
    utts: int = 8
    seconds: float = 3.0


@dataclass
class EvalConfig:
    windows_per_utt: int = 4
    window_frames: int = 25
    mode: str = "mean"
    seed: int = 0
    gl_iterations: int = 60


@dataclass
class GStrengthConfig:
    num_samples: int = 100
    delta: float = 0.5


@dataclass
class RunConfig:
    seed: int | None = None
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    surrogates: SurrogateConfig = field(default_factory=SurrogateConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    gstrength: GStrengthConfig = field(default_factory=GStrengthConfig)

    def to_dict(self) -> dict:
        return asdict(self)


def build(cls, data: dict, where: str = ""):
    """Instantiate dataclass ``cls`` from a nested mapping, rejecting unknown keys."""
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"[{where}] must be a table, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s) in [{where or cls.__name__}]: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = known[name].default_factory() if callable(known[name].default_factory) else None
        if is_dataclass(default) and isinstance(value, dict):
            value = build(type(default), value, f"{where}.{name}" if where else name)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a TOML run config, apply ``overrides`` (section -> {key: value}) and resolve the seed.

    Seed precedence: explicit override, then the file, then ``LIPVOX_SEED``, then 0.
    """
    data = {}
    if path is not None:
        with open(path, "rb") as fh:
            try:
                data = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"cannot parse {path}: {exc}") from exc
    for section, values in (overrides or {}).items():
        if section == "seed":
            if values is not None:
                data["seed"] = values
            continue
        clean = {k: v for k, v in values.items() if v is not None}
        if clean:
            data.setdefault(section, {}).update(clean)
    cfg = build(RunConfig, data, "")
    if cfg.seed is None:
        env = os.environ.get(SEED_ENV)
        cfg.seed = int(env) if env not in (None, "") else 0
    return cfg
