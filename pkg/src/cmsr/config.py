"""Run configuration: nested sections, strict keys, documented defaults.

A config file is JSON. Every section and key is optional; omitted values
take the defaults below, and a fully-defaulted config reproduces the
desk-scale experiment (teacher training, distillation, evaluation).
Unknown keys are rejected. ``CMSR_OUTPUT_DIR`` overrides ``output_dir``.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .denoiser import UNetConfig
from .distillation import HyperParams
from .errors import ConfigError

OUTPUT_DIR_ENV = "CMSR_OUTPUT_DIR"


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_1: float = 1e-4
    beta_T: float = 0.02


@dataclass
class DataConfig:
    # "synthetic" generates textures; "directory" reads PNGs prepared by `cmsr etl`
    source: str = "synthetic"
    input_dir: str | None = None
    test_dir: str | None = None
    image_size: int = 32
    crop_mode: str = "center"
    textures: list[str] = field(default_factory=lambda: ["checkerboard", "stripes", "gradient", "blobs"])
    train_count: int = 512
    test_count: int = 64
    train_seed: int = 1
    test_seed: int = 2


@dataclass
class TrainConfig:
    teacher_steps: int = 6000
    teacher_lr: float = 1e-3
    # decay of the teacher's weight average; 0 disables it
    teacher_ema: float = 0.999
    distill_steps: int = 2000
    checkpoint_every: int = 0
    seed: int = 0
    model_seed: int = 0


@dataclass
class SamplingConfig:
    ddim_steps: int = 50
    # picked on a validation split (seed 3) disjoint from train and test; None means [T, T/2, T/5, T/20]
    cm_step_times: list[int] | None = field(default_factory=lambda: [1000, 800, 600, 400])
    clip_denoised: bool = True
    seed: int = 0


@dataclass
class Config:
    unet: UNetConfig = field(default_factory=lambda: UNetConfig(prior_std=0.1))
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    hp: HyperParams = field(default_factory=HyperParams)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    output_dir: str = "runs/desk"

    def validate(self) -> None:
        if self.hp.T != self.schedule.T:
            raise ConfigError(f"hp.T ({self.hp.T}) must equal schedule.T ({self.schedule.T})")
        if self.hp.image_size != self.data.image_size:
            raise ConfigError(f"hp.image_size ({self.hp.image_size}) must equal data.image_size ({self.data.image_size})")
        if not 0.0 <= self.train.teacher_ema < 1.0:
            raise ConfigError(f"train.teacher_ema must be in [0, 1), got {self.train.teacher_ema}")
        if self.data.source not in ("synthetic", "directory"):
            raise ConfigError(f"data.source must be 'synthetic' or 'directory', got {self.data.source!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, values, path: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{path or 'config'} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(path + k for k in unknown)}")
    kwargs = {}
    base = cls()
    for name, value in values.items():
        default = getattr(base, name) if name in _SECTIONS.get(cls, ()) else None
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build_onto(default, value, f"{path}{name}.")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _build_onto(default, values, path: str):
    # a section overrides only the keys it names; the rest keep the section's own default
    built = _build(type(default), values, path)
    given = {k: getattr(built, k) for k in values}
    try:
        return dataclasses.replace(default, **given)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


_SECTIONS = {Config: ("unet", "schedule", "hp", "data", "train", "sampling")}


def from_dict(values: dict) -> Config:
    cfg = _build(Config, values, "")
    if os.environ.get(OUTPUT_DIR_ENV):
        cfg.output_dir = os.environ[OUTPUT_DIR_ENV]
    cfg.validate()
    return cfg


def load_config(path=None) -> Config:
    if path is None:
        return from_dict({})
    try:
        values = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return from_dict(values)
