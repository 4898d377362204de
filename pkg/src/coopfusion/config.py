"""Versioned run configuration: one YAML file drives generation through reports.

A run config is a tree of the per-module dataclasses (scene, model, train,
eval, data split). Loading starts from a named preset's defaults and merges
the file's sections on top, so a config file only states what it changes.
Unknown keys anywhere in the tree are rejected with the dotted path that
caused the problem; cross-section consistency (channel/depth-bin/camera
agreement between the scene generator and the model) is validated before any
command runs.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, is_dataclass, replace

import yaml

from .evaluation import ABLATION_VARIANTS
from .model import ModelConfig
from .scene import SceneConfig
from .training import TrainConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Raised for malformed, unknown, or inconsistent configuration."""


@dataclass(frozen=True)
class DataConfig:
    """Dataset split sizes and the seed ranges that keep them disjoint."""

    train_scenes: int = 500
    test_scenes: int = 100
    train_seed_start: int = 0
    test_seed_start: int = 1_000_000

    def __post_init__(self):
        if self.train_scenes < 1 or self.test_scenes < 1:
            raise ValueError("both splits need at least one scene")
        train_end = self.train_seed_start + self.train_scenes
        test_end = self.test_seed_start + self.test_scenes
        if (self.train_seed_start < test_end
                and self.test_seed_start < train_end):
            raise ValueError("train and test scene seed ranges overlap")


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.7
    dedup_iou: float = 0.15
    noise_sigmas: tuple = (0.0, 0.1, 0.2, 0.4, 0.6)
    noise_seeds: int = 3
    delays: tuple = (0.0, 0.1, 0.25, 0.5)
    variants: tuple = ("full", "no_roe", "single_window")

    def __post_init__(self):
        for v in self.variants:
            if v not in ABLATION_VARIANTS:
                raise ValueError(f"unknown ablation variant {v!r}")


@dataclass(frozen=True)
class RunConfig:
    version: int = CONFIG_VERSION
    out_dir: str = "runs/desk"
    data: DataConfig = field(default_factory=DataConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def desk_config() -> RunConfig:
    """Small dimensions sized so the full pipeline runs on a laptop CPU."""
    return RunConfig()


def paper_scale_config() -> RunConfig:
    """Full-size dimensions (wide channels, deep range, four cameras).

    These settings are provided for completeness; training at this size is a
    GPU-day job, not something the test suite exercises.
    """
    rig = replace(SceneConfig().rig, count=4, depth_bins=80, d_max=60.5,
                  yaw_offsets=(-3 * math.pi / 4, -math.pi / 4,
                               math.pi / 4, 3 * math.pi / 4),
                  mount_offsets=((-1.5, -0.9), (1.5, -0.9),
                                 (1.5, 0.9), (-1.5, 0.9)))
    feature = replace(SceneConfig().feature, channels=256)
    scene = replace(SceneConfig(), extent=51.2, num_vehicles=40,
                    rig=rig, feature=feature)
    model = replace(ModelConfig(), channels=256, depth_bins=80, cameras=4,
                    ego_slots=600, collab_slots=200)
    train = replace(TrainConfig(), epochs=72, lr=1e-4)
    return RunConfig(out_dir="runs/paper_scale", scene=scene, model=model,
                     train=train)


PRESETS = {"desk": desk_config, "paper_scale": paper_scale_config}


# -- strict merge of a mapping onto a dataclass tree --------------------------------


def _coerce(value, template, path: str):
    """Coerce a parsed YAML value to the type of the field it replaces."""
    if isinstance(template, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(template, int) and not isinstance(template, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(template, float):
        if isinstance(value, str):
            # YAML 1.1 reads exponent forms like "1e-3" as strings
            try:
                return float(value)
            except ValueError:
                raise ConfigError(f"{path}: expected a number, got {value!r}")
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(template, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(template, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    raise ConfigError(f"{path}: unsupported field type {type(template).__name__}")


def _merge(obj, mapping: dict, path: str):
    """Return ``obj`` with the mapping's keys replaced, rejecting unknowns."""
    if not isinstance(mapping, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, "
                          f"got {type(mapping).__name__}")
    by_name = {f.name: f for f in dataclasses.fields(obj)}
    updates = {}
    for key, value in mapping.items():
        where = f"{path}.{key}" if path else key
        if key not in by_name:
            raise ConfigError(f"unknown config key {where!r}")
        current = getattr(obj, key)
        if is_dataclass(current):
            updates[key] = _merge(current, value, where)
        else:
            updates[key] = _coerce(value, current, where)
    try:
        return replace(obj, **updates)
    except ValueError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def config_from_mapping(mapping: dict) -> RunConfig:
    """Build a validated run config from a parsed YAML mapping."""
    if not isinstance(mapping, dict):
        raise ConfigError("config root must be a mapping")
    mapping = dict(mapping)
    version = mapping.pop("version", None)
    if version != CONFIG_VERSION:
        raise ConfigError(f"config version must be {CONFIG_VERSION}, "
                          f"got {version!r}")
    preset = mapping.pop("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; "
                          f"choose from {sorted(PRESETS)}")
    cfg = _merge(PRESETS[preset](), mapping, "")
    validate_run_config(cfg)
    return cfg


def load_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            mapping = yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file is not valid YAML: {exc}") from exc
    return config_from_mapping(mapping)


def validate_run_config(cfg: RunConfig) -> None:
    """Cross-section consistency the individual dataclasses cannot see."""
    pairs = [("model.channels", cfg.model.channels,
              "scene.feature.channels", cfg.scene.feature.channels),
             ("model.depth_bins", cfg.model.depth_bins,
              "scene.rig.depth_bins", cfg.scene.rig.depth_bins),
             ("model.cameras", cfg.model.cameras,
              "scene.rig.count", cfg.scene.rig.count)]
    for name_a, a, name_b, b in pairs:
        if a != b:
            raise ConfigError(f"{name_a} ({a}) must equal {name_b} ({b})")


# -- scalar overrides from the command line ------------------------------------------


def _set_path(node, parts: list, raw_value, dotted: str):
    name = parts[0]
    if not is_dataclass(node) or name not in {
            f.name for f in dataclasses.fields(node)}:
        raise ConfigError(f"unknown config key {dotted!r}")
    current = getattr(node, name)
    if len(parts) == 1:
        if is_dataclass(current) or isinstance(current, tuple):
            raise ConfigError(f"{dotted}: only scalar fields may be "
                              "overridden from the command line")
        new = _coerce(raw_value, current, dotted)
    else:
        new = _set_path(current, parts[1:], raw_value, dotted)
    try:
        return replace(node, **{name: new})
    except ValueError as exc:
        raise ConfigError(f"{dotted}: {exc}") from exc


def apply_overrides(cfg: RunConfig, overrides: list) -> RunConfig:
    """Apply ``section.field=value`` strings; scalar fields only."""
    for text in overrides:
        if "=" not in text:
            raise ConfigError(f"override {text!r} must look like key=value")
        dotted, raw = text.split("=", 1)
        cfg = _set_path(cfg, dotted.split("."), yaml.safe_load(raw), dotted)
    validate_run_config(cfg)
    return cfg


# -- serialization ---------------------------------------------------------------------


def _to_plain(obj):
    if is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name))
                for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    return obj


def dump_config(cfg: RunConfig) -> str:
    """YAML text that reloads to an equal config (used for run provenance)."""
    return yaml.safe_dump(_to_plain(cfg), sort_keys=True,
                          default_flow_style=False)
