"""Flat, versioned run configuration.

One YAML mapping holds every setting. Keys are unique across the dataset,
architecture, training and evaluation groups, except for the shared keys
``seed`` (data generation and training) and ``num_classes`` (data and
architecture). Unknown keys are rejected so that a typo never
silently falls back to a default.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from sedkit.detector import ArchConfig
from sedkit.synthdata import DatasetConfig, DatasetConfigError
from sedkit.trainer import MODES, TrainConfig, apply_mode

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass(frozen=True)
class EvalConfig:
    score_thr: float = 0.05
    nms_thr: float = 0.5
    ms_scales: tuple = (0.5, 1.0, 1.5)


@dataclass(frozen=True)
class RunConfig:
    data: DatasetConfig = field(default_factory=DatasetConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    mode: str = "sed"

    def train_config(self) -> TrainConfig:
        """Training settings with the ablation mode applied."""
        return apply_mode(self.train, self.mode)


SHARED = {"seed": ("data", "train"), "num_classes": ("data", "arch")}


def _key_map() -> dict:
    """flat key -> (group, field) for the non-shared keys."""
    out = {}
    for group, cls in (("data", DatasetConfig), ("arch", ArchConfig),
                       ("train", TrainConfig), ("eval", EvalConfig)):
        for f in dataclasses.fields(cls):
            if f.name in SHARED:
                continue
            key = f"eval_{f.name}" if group == "eval" and f.name.endswith("_thr") else f.name
            if key in out:
                raise RuntimeError(f"duplicate config key {key}")
            out[key] = (group, f.name)
    return out


KEYS = _key_map()


def _coerce(key: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return tuple(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    return value


def from_dict(d: dict) -> RunConfig:
    """Build and validate a :class:`RunConfig` from a flat mapping."""
    if not isinstance(d, dict):
        raise ConfigError("config must be a mapping")
    d = dict(d)
    version = d.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, got {version!r}")
    unknown = sorted(k for k in d if k not in KEYS and k not in SHARED and k != "mode")
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    base = RunConfig()
    groups = {"data": {}, "arch": {}, "train": {}, "eval": {}}
    for key, value in d.items():
        if key == "mode":
            continue
        if key in SHARED:
            value = _coerce(key, value, 0)
            for group in SHARED[key]:
                groups[group][key] = value
            continue
        group, name = KEYS[key]
        default = getattr(getattr(base, group), name)
        groups[group][name] = _coerce(key, value, default)
    mode = _coerce("mode", d.get("mode", base.mode), base.mode)
    if mode not in MODES:
        raise ConfigError(f"mode: unknown value {mode!r}; choose from {', '.join(MODES)}")
    cfg = RunConfig(
        data=dataclasses.replace(base.data, **groups["data"]),
        arch=dataclasses.replace(base.arch, **groups["arch"]),
        train=dataclasses.replace(base.train, **groups["train"]),
        eval=dataclasses.replace(base.eval, **groups["eval"]),
        mode=mode,
    )
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> RunConfig:
    try:
        cfg.data.validate()
    except DatasetConfigError as exc:
        raise ConfigError(str(exc)) from exc
    try:
        cfg.train.validate()
    except ValueError as exc:
        raise ConfigError(f"training settings: {exc}") from exc
    if len(cfg.arch.stem_kernels) != len(cfg.arch.stem_channels):
        raise ConfigError("stem_kernels: length must match stem_channels")
    if cfg.arch.num_classes != cfg.data.num_classes:
        raise ConfigError("num_classes: architecture and dataset disagree")
    if cfg.data.image_size % cfg.arch.strides[-1]:
        raise ConfigError(f"image_size: must be divisible by the largest stride {cfg.arch.strides[-1]}")
    if cfg.train.max_scale_exp >= cfg.arch.num_levels:
        raise ConfigError("max_scale_exp: must be smaller than the number of pyramid levels")
    if cfg.data.image_size % (2 ** cfg.train.max_scale_exp * cfg.arch.strides[-1]):
        raise ConfigError("max_scale_exp: downsampled images no longer fit the stride grid")
    if any(s <= 0 for s in cfg.eval.ms_scales):
        raise ConfigError("ms_scales: factors must be positive")
    return cfg


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


def to_dict(cfg: RunConfig) -> dict:
    """Flat mapping (with ``schema_version``) that :func:`from_dict` accepts."""
    out = {"schema_version": SCHEMA_VERSION, "seed": cfg.train.seed,
           "num_classes": cfg.arch.num_classes, "mode": cfg.mode}
    for key, (group, name) in KEYS.items():
        out[key] = _plain(getattr(getattr(cfg, group), name))
    return out


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            d = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return from_dict(d or {})


def dump_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        yaml.safe_dump(to_dict(cfg), fh, sort_keys=True)
    return path
