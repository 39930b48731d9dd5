"""Dataclass configs and YAML loading with flag overrides."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigurationError

DEFAULT_MODALITIES = ("M", "F", "A", "T")

# Index = bitmask - 1 (bit 0 = M, bit 1 = F, bit 2 = A, bit 3 = T).
# Singletons total 0.608, all-four 0.059.
DEFAULT_PATTERN_WEIGHTS = (
    0.300,  # M
    0.060,  # F
    0.050,  # MF
    0.180,  # A
    0.090,  # MA
    0.030,  # FA
    0.025,  # MFA
    0.068,  # T
    0.030,  # MT
    0.020,  # FT
    0.020,  # MFT
    0.040,  # AT
    0.018,  # MAT
    0.010,  # FAT
    0.059,  # MFAT
)


@dataclass
class ModelConfig:
    modalities: tuple = DEFAULT_MODALITIES
    feature_dims: tuple = (32, 32, 32, 32)
    model_dim: int = 64
    encoder_hidden: int = 128
    heads: int = 4
    head_hidden: int = 64
    bank_init_std: float = 0.02

    def validate(self):
        if len(self.modalities) != len(self.feature_dims):
            raise ConfigurationError("modalities and feature_dims have different lengths")
        if len(self.modalities) < 1:
            raise ConfigurationError("at least one modality is required")
        if self.model_dim % self.heads:
            raise ConfigurationError(f"model_dim {self.model_dim} is not divisible by heads {self.heads}")


@dataclass
class RoutingConfig:
    strategy: str = "per-modality"  # "shared" | "per-modality"
    experts: int = 16
    top_k: int = 2
    expert_hidden: int = 64
    renormalize: bool = False
    specialization: bool = True
    specialize_imputed: bool = True

    def validate(self, n_modalities: int):
        if self.strategy not in ("shared", "per-modality"):
            raise ConfigurationError(f"unknown routing strategy {self.strategy!r}")
        if not 1 <= self.top_k <= self.experts:
            raise ConfigurationError(f"top_k={self.top_k} must lie in [1, experts={self.experts}]")
        need = 2**n_modalities
        if self.specialization and self.experts < need:
            raise ConfigurationError(
                f"specialization needs experts >= {need} ({need - 1} combinations + buffer), got {self.experts}"
            )


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    seeds: tuple = (0, 1, 2)
    lambda_bal: float = 0.01
    lambda_spec: float = 0.1
    clip_norm: float | None = 5.0
    weight_decay: float = 0.0

    def validate(self):
        if self.patience > self.max_epochs:
            raise ConfigurationError("patience exceeds max_epochs")
        if len(self.seeds) < 1:
            raise ConfigurationError("at least one seed is required")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be positive")


@dataclass
class GeneratorConfig:
    participants: int = 500
    # P(k subjects per participant) for k = 1, 2, ...
    subjects_per_participant: tuple = (0.5, 0.3, 0.15, 0.05)
    modalities: tuple = DEFAULT_MODALITIES
    feature_dims: tuple = (32, 32, 32, 32)
    latent_dim: int = 4
    private_dim: int = 3
    shared_scale: float = 3.0
    private_scale: float = 1.0
    noise_scale: float = 0.1
    drift: float = 0.3
    pattern_weights: tuple = DEFAULT_PATTERN_WEIGHTS
    mode: str = "modality-specialized"  # or "shared-latent"
    quantum: float = 0.5
    seed: int = 0

    def validate(self):
        if self.participants < 1:
            raise ConfigurationError("participants must be >= 1")
        n = len(self.modalities)
        if len(self.feature_dims) != n:
            raise ConfigurationError("modalities and feature_dims have different lengths")
        if len(self.pattern_weights) != 2**n - 1:
            raise ConfigurationError(f"need {2**n - 1} pattern weights, got {len(self.pattern_weights)}")
        if min(self.pattern_weights) < 0 or not math.isclose(sum(self.pattern_weights), 1.0, abs_tol=1e-9):
            raise ConfigurationError("pattern weights must be nonnegative and sum to 1")
        if min(self.subjects_per_participant) < 0 or not math.isclose(
            sum(self.subjects_per_participant), 1.0, abs_tol=1e-9
        ):
            raise ConfigurationError("subjects_per_participant must be a probability vector")
        if self.mode not in ("shared-latent", "modality-specialized"):
            raise ConfigurationError(f"unknown generator mode {self.mode!r}")


@dataclass
class RunConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    routing: RoutingConfig = field(default_factory=RoutingConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: tuple = (0.70, 0.15, 0.15)
    split_seed: int = 0
    out: str = "runs/default"
    verbosity: int = 1

    def validate(self):
        self.generator.validate()
        self.model.validate()
        self.routing.validate(len(self.model.modalities))
        self.train.validate()
        if tuple(self.model.modalities) != tuple(self.generator.modalities):
            raise ConfigurationError("model and generator modalities differ")
        if tuple(self.model.feature_dims) != tuple(self.generator.feature_dims):
            raise ConfigurationError("model and generator feature_dims differ")
        return self


_SECTIONS = {"generator": GeneratorConfig, "model": ModelConfig, "routing": RoutingConfig, "train": TrainConfig}


def _coerce(cls, values: dict):
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in values.items():
        if key not in names:
            raise ConfigurationError(f"unknown key {cls.__name__}.{key}")
        kwargs[key] = tuple(val) if isinstance(val, list) else val
    return cls(**kwargs)


def run_config_from_dict(data: dict) -> RunConfig:
    data = dict(data or {})
    kwargs = {}
    for name, cls in _SECTIONS.items():
        kwargs[name] = _coerce(cls, data.pop(name, {}) or {})
    for key in ("split", "split_seed", "out", "verbosity"):
        if key in data:
            val = data.pop(key)
            kwargs[key] = tuple(val) if isinstance(val, list) else val
    if data:
        raise ConfigurationError(f"unknown top-level keys: {sorted(data)}")
    return RunConfig(**kwargs)


def load_run_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"{path}: malformed YAML: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return run_config_from_dict(raw)


def run_config_to_dict(cfg: RunConfig) -> dict:
    def plain(v):
        if isinstance(v, tuple):
            return [plain(x) for x in v]
        return v

    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            out[f.name] = {k: plain(x) for k, x in dataclasses.asdict(v).items()}
        else:
            out[f.name] = plain(v)
    return out


def dump_run_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(run_config_to_dict(cfg), sort_keys=False), encoding="utf-8")
