"""Run configuration: nested sections loaded from and saved to YAML.

Every section maps onto the dataclass that the owning module validates,
so a config file fails fast with the module's own error message.  Keys
are strict: unknown names raise instead of being silently ignored.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field

import yaml

from .codec import CodecConfig
from .denoiser import GateConfig, TrunkConfig

__all__ = [
    "ScheduleSection",
    "ConditioningSection",
    "DataSection",
    "OptimizerSection",
    "RunConfig",
    "config_from_dict",
    "config_to_dict",
    "load_config",
    "save_config",
]


@dataclass(frozen=True)
class ScheduleSection:
    """Diffusion noise schedule and sampler settings."""

    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    variance: str = "posterior"
    sample_steps: int = 50

    def __post_init__(self) -> None:
        if self.T < 1:
            raise ValueError(f"T must be positive, got {self.T}")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ValueError(f"betas must satisfy 0 < start <= end < 1, got "
                             f"({self.beta_start}, {self.beta_end})")
        if self.variance not in ("posterior", "beta"):
            raise ValueError(f"variance must be 'posterior' or 'beta', got {self.variance!r}")
        if not 1 <= self.sample_steps <= self.T:
            raise ValueError(f"sample_steps must lie in 1..T, got {self.sample_steps}")


@dataclass(frozen=True)
class ConditioningSection:
    """Token source and condition-encoder shape."""

    source: str = "caption"
    max_len: int = 16
    width: int = 128
    layers: int = 2
    heads: int = 4

    def __post_init__(self) -> None:
        if self.source not in ("caption", "layout"):
            raise ValueError(f"source must be 'caption' or 'layout', got {self.source!r}")
        if min(self.max_len, self.width, self.layers, self.heads) < 1:
            raise ValueError("max_len, width, layers and heads must be positive")
        if self.width % self.heads != 0:
            raise ValueError(f"width {self.width} not divisible by {self.heads} heads")


@dataclass(frozen=True)
class DataSection:
    """Synthetic scene dataset shape.

    Held-out images use indices at and beyond ``dataset_size`` of the
    same seed, so train and validation never overlap.
    """

    dataset_size: int = 2000
    val_size: int = 64
    image_size: int = 64
    max_objects: int = 4
    seed: int = 7

    def __post_init__(self) -> None:
        if self.dataset_size < 1 or self.val_size < 1:
            raise ValueError("dataset_size and val_size must be positive")
        if not 1 <= self.max_objects <= 4:
            raise ValueError(f"max_objects must be in 1..4, got {self.max_objects}")


@dataclass(frozen=True)
class OptimizerSection:
    """Decoupled-weight-decay Adam settings.

    ``scale_lr`` multiplies the base rate by the batch size (the common
    linear scaling rule); it is off by default.
    """

    lr: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    scale_lr: bool = False

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError(f"betas must be two values in [0, 1), got {self.betas}")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ValueError("eps must be positive and weight_decay nonnegative")

    def effective_lr(self, batch_size: int) -> float:
        return self.lr * batch_size if self.scale_lr else self.lr


@dataclass(frozen=True)
class RunConfig:
    """Everything one training or evaluation run needs."""

    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    codec: CodecConfig = field(default_factory=CodecConfig)
    denoiser: TrunkConfig = field(default_factory=TrunkConfig)
    gate: GateConfig = field(default_factory=GateConfig)
    conditioning: ConditioningSection = field(default_factory=ConditioningSection)
    data: DataSection = field(default_factory=DataSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    ema_decay: float = 0.999
    batch_size: int = 16
    max_steps: int = 1000
    seed: int = 23
    checkpoint_every: int = 1000
    cond_dropout: float = 0.1
    out_dir: str = "runs/default"

    def __post_init__(self) -> None:
        if not isinstance(self.seed, int):
            raise ValueError("seed must be present as an integer")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must be in (0, 1), got {self.ema_decay}")
        if self.batch_size < 1 or self.max_steps < 1 or self.checkpoint_every < 1:
            raise ValueError("batch_size, max_steps and checkpoint_every must be positive")
        if not 0.0 <= self.cond_dropout < 1.0:
            raise ValueError(f"cond_dropout must be in [0, 1), got {self.cond_dropout}")
        if self.conditioning.width != self.denoiser.context_dim:
            raise ValueError(
                f"conditioning width {self.conditioning.width} must equal the "
                f"denoiser context_dim {self.denoiser.context_dim}"
            )
        if self.data.image_size != self.codec.image_size:
            raise ValueError(
                f"data image_size {self.data.image_size} must equal the "
                f"codec image_size {self.codec.image_size}"
            )


def _build(cls: type, mapping: dict, path: str):
    """Construct a dataclass from a mapping, strictly and recursively."""
    if not isinstance(mapping, dict):
        raise ValueError(f"section {path or cls.__name__!r} must be a mapping, got {type(mapping).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(mapping) - names
    if unknown:
        raise ValueError(f"unknown key(s) {sorted(unknown)} in section {path or 'top level'}")
    kwargs = {}
    for name, value in mapping.items():
        hint = hints[name]
        here = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(hint) and isinstance(value, dict):
            value = _build(hint, value, here)
        elif typing.get_origin(hint) is tuple and isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(mapping: dict) -> RunConfig:
    return _build(RunConfig, mapping or {}, "")


def _plain(value):
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def config_to_dict(cfg: RunConfig) -> dict:
    """Plain nested dict (tuples as lists) for YAML and manifests."""
    return _plain(cfg)


def load_config(path: str) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    return config_from_dict(raw)


def save_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=False)
