"""Experiment configuration: nested dataclasses loaded from YAML overlays.

Defaults in code equal the shipped ``configs/method_defaults.yaml`` plus
``configs/plumbing_defaults.yaml``. Each YAML file may override any
subset of keys; unknown keys are rejected so typos do not pass silently.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import yaml

from .adaptation import MODES, AdaptConfig
from .mppi import MppiConfig
from .pretrain import ExcitationConfig, TrainConfig
from .sim import SimConfig, two_mat_map
from .track import TrackSpec


@dataclass(frozen=True)
class SurfaceConfig:
    """Two-mat layout: rubber on X >= split_x, foam on X < split_x, cement elsewhere."""

    mu_cement: float = 0.9
    mu_rubber: float = 1.2
    mu_foam: float = 0.6
    stiffness_rubber: float = 2.0
    stiffness_foam: float = 1.0
    split_x: float = 0.0
    half_extent: tuple = (4.0, 2.75)

    def two_mat(self):
        return two_mat_map(self.split_x, tuple(self.half_extent), self.mu_rubber, self.mu_foam, self.mu_cement,
                           self.stiffness_rubber, self.stiffness_foam)


@dataclass(frozen=True)
class PretrainSettings:
    duration: float = 600.0  # seconds of simulated excitation driving
    seed: int = 0
    holdout_every: int = 10  # every n-th window is held out for validation
    finetune_laps: int = 8
    finetune_seed: int = 1000
    excitation: ExcitationConfig = ExcitationConfig()
    train: TrainConfig = TrainConfig()


@dataclass(frozen=True)
class ExperimentSettings:
    seeds: tuple = (0, 1, 2, 3, 4)
    inference_seeds: tuple = (0, 1, 2)
    modes: tuple = MODES
    laps: int = 18
    first_scored_lap: int = 2
    max_time: float = 300.0
    inference_duration: float = 60.0
    output_dir: str = "runs"

    def __post_init__(self):
        if not self.seeds or not self.inference_seeds:
            raise ValueError("seed lists must be non-empty")
        bad = set(self.modes) - set(MODES)
        if bad or not self.modes:
            raise ValueError(f"unknown modes {sorted(bad)}; choose from {MODES}")
        if not 1 <= self.first_scored_lap <= self.laps:
            raise ValueError("first_scored_lap must lie within the lap count")


@dataclass(frozen=True)
class ExperimentConfig:
    sim: SimConfig = SimConfig()
    surfaces: SurfaceConfig = SurfaceConfig()
    track: TrackSpec = TrackSpec()
    costmap_resolution: float = 0.05
    mppi: MppiConfig = MppiConfig()
    adapt: AdaptConfig = AdaptConfig()
    pretrain: PretrainSettings = PretrainSettings()
    experiment: ExperimentSettings = ExperimentSettings()

    @property
    def output_dir(self) -> Path:
        return Path(self.experiment.output_dir)


def _coerce(current, value):
    if isinstance(current, tuple) and isinstance(value, list):
        return tuple(value)
    if isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def apply_overrides(obj, data: dict, path: str = ""):
    """Return a copy of dataclass ``obj`` with nested ``data`` applied."""
    if not isinstance(data, dict):
        raise ValueError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in fields(obj)}
    changes = {}
    for key, value in data.items():
        if key not in names:
            raise ValueError(f"unknown config key {path + key!r}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            changes[key] = apply_overrides(current, value or {}, f"{path}{key}.")
        else:
            changes[key] = _coerce(current, value)
    return replace(obj, **changes)


def load_config(paths=(), overrides: dict | None = None) -> ExperimentConfig:
    """Defaults, then each YAML file in order, then ``overrides``."""
    cfg = ExperimentConfig()
    for p in paths:
        with open(p) as fh:
            data = yaml.safe_load(fh) or {}
        cfg = apply_overrides(cfg, data)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    cfg.track.validate()
    return cfg


def to_dict(cfg) -> dict:
    """Plain nested dict (tuples as lists) suitable for YAML/JSON."""
    def conv(v):
        if dataclasses.is_dataclass(v):
            return {f.name: conv(getattr(v, f.name)) for f in fields(v)}
        if isinstance(v, (tuple, list)):
            return [conv(x) for x in v]
        return v
    return conv(cfg)
