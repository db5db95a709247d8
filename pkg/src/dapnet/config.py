"""Run configuration: flat ``key = value`` files with command-line overrides.

Defaults carry the reference training regime (batch 16, 200 epochs,
learning rate 1e-3 decaying to 1e-5, weight decay 1e-4, 30 m blocks with a
10 m stride, 1024-point samples) on the desk-scale network.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from . import pipeline, train
from .model import VARIANTS, ModelConfig

RUNS_ENV = "DAPNET_RUNS"
PRESETS = ("desk", "micro", "paper")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    preset: str = "desk"
    variant: str = "PGM"
    classes: str = "ground,roof,tree,car"  # comma-separated; label k names classes[k]
    softmax_mode: str = "row"
    block_size: float = pipeline.BLOCK_SIZE
    stride: float = pipeline.STRIDE
    min_points: int = pipeline.MIN_POINTS
    sample_size: int = pipeline.SAMPLE_SIZE
    batch_size: int = train.BATCH_SIZE
    epochs: int = train.EPOCHS
    lr_initial: float = train.LR_INITIAL
    lr_final: float = train.LR_FINAL
    weight_decay: float = train.WEIGHT_DECAY
    seed: int = 0

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {PRESETS}, got {self.preset!r}")
        if self.variant.upper() not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if len(self.class_names) < 2:
            raise ConfigError("need at least two class names")
        if self.epochs < 0 or self.batch_size < 1 or self.sample_size < 1 or self.min_points < 0:
            raise ConfigError("epochs >= 0, batch_size >= 1, sample_size >= 1, min_points >= 0")

    @property
    def class_names(self) -> list:
        return [c.strip() for c in self.classes.split(",") if c.strip()]

    def model_config(self) -> ModelConfig:
        make = getattr(ModelConfig, self.preset)
        cfg = make(num_classes=len(self.class_names), softmax_mode=self.softmax_mode)
        return cfg.with_variant(self.variant)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    def with_overrides(self, values: dict) -> "RunConfig":
        return replace(self, **_coerce(values))


def _coerce(values: dict) -> dict:
    types = {f.name: f.type for f in fields(RunConfig)}
    out = {}
    for key, raw in values.items():
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        kind = {"int": int, "float": float, "str": str}[types[key]]
        try:
            out[key] = kind(raw) if kind is not int else int(str(raw), 10)
        except ValueError:
            raise ConfigError(f"{key}: cannot read {raw!r} as {types[key]}") from None
    return out


def parse_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def load(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (highest precedence)."""
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        cfg = cfg.with_overrides(parse_text(p.read_text(), str(p)))
    return cfg.with_overrides({k: v for k, v in (overrides or {}).items() if v is not None})


def runs_root() -> Path:
    return Path(os.environ.get(RUNS_ENV, "runs"))
