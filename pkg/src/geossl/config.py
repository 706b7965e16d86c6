"""Experiment configuration: presets, YAML round trip and dotted overrides.

Precedence: ``--set`` overrides > config file > preset defaults.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .augmentation import B1Config, B2Config

METHODS = ("simclr", "byol")
MODULES = ("none", "affine", "homography", "rotation", "translation", "scale", "shear")
LOSS_VARIANTS = ("regression", "invariant", "concat")
PLACEMENTS = ("on_f", "on_g")
PRESETS = ("desk", "paper")


class ConfigError(ValueError):
    pass


@dataclass
class OptimizerConfig:
    name: str = "adam"
    lr: float = 3e-4
    momentum: float = 0.0
    weight_decay: float = 1e-6


@dataclass
class DataConfig:
    name: str = "synthetic-shapes"
    root: str | None = None
    n_train: int = 500
    n_test: int = 200
    seed: int = 0
    download: bool = False


@dataclass
class ModelConfig:
    widths: list = field(default_factory=lambda: [16, 32, 64, 128])
    proj_hidden: int = 256
    proj_dim: int = 64
    reg_hidden: int = 256


@dataclass
class EvalConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 3e-4
    standardize: bool = True


@dataclass
class B2Section:
    rotation: list = field(default_factory=lambda: [-90.0, 90.0])
    translation: list = field(default_factory=lambda: [0.0, 0.25])
    scale: list = field(default_factory=lambda: [0.7, 1.3])
    shear: list = field(default_factory=lambda: [-25.0, 25.0])
    perspective: float = 0.5


@dataclass
class ExperimentConfig:
    method: str = "simclr"
    module: str = "affine"
    loss_variant: str = "regression"
    regression_kind: str = "mse"
    placement: str = "on_f"
    two_modules: bool = False
    preset: str = "desk"
    batch_size: int = 64
    epochs: int = 20
    warmup_epochs: int = 2
    temperature: float = 0.5
    tau: float = 0.99
    lam: float = 1.0
    byol_symmetric: bool = True
    interp: str = "bilinear"
    seed: int = 0
    checkpoint_every: int = 10
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    b2: B2Section = field(default_factory=B2Section)

    # --- derived views ---

    def b1_config(self) -> B1Config:
        return B1Config()

    def b2_config(self) -> B2Config | None:
        if self.module == "none":
            return None
        return B2Config(
            mode=self.module,
            rotation=tuple(self.b2.rotation),
            translation=tuple(self.b2.translation),
            scale=tuple(self.b2.scale),
            shear=tuple(self.b2.shear),
            perspective=self.b2.perspective,
        )

    def validate(self) -> "ExperimentConfig":
        choices = {
            "method": METHODS,
            "module": MODULES,
            "loss_variant": LOSS_VARIANTS,
            "placement": PLACEMENTS,
            "preset": PRESETS,
            "regression_kind": ("mse", "logcosh"),
            "interp": ("bilinear", "nearest"),
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key}={getattr(self, key)!r} not in {allowed}")
        if self.module == "none" and self.loss_variant != "regression":
            raise ConfigError(f"loss_variant={self.loss_variant!r} requires a module other than 'none'")
        if self.loss_variant == "invariant" and (self.two_modules or self.placement != "on_f"):
            raise ConfigError("the invariant variant only supports a single module on f")
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigError("epochs must be >= 1 and batch_size >= 2")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("warmup_epochs must lie in [0, epochs)")
        if self.temperature <= 0 or not 0.0 <= self.tau <= 1.0:
            raise ConfigError("temperature must be > 0 and tau in [0, 1]")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        if self.optimizer.name not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer.name!r}")
        self.b2_config()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def preset_defaults(method: str = "simclr", preset: str = "desk") -> dict:
    """Default values for a (method, preset) pair as a nested dict."""
    if method not in METHODS:
        raise ConfigError(f"method={method!r} not in {METHODS}")
    if preset not in PRESETS:
        raise ConfigError(f"preset={preset!r} not in {PRESETS}")
    if method == "simclr":
        opt = {"name": "adam", "lr": 3e-4, "momentum": 0.0, "weight_decay": 1e-6}
    else:
        opt = {"name": "sgd", "lr": 0.03, "momentum": 0.9, "weight_decay": 4e-4}
    out: dict[str, Any] = {"method": method, "preset": preset, "optimizer": opt}
    if preset == "paper":
        out.update(batch_size=256, epochs=100, warmup_epochs=10, eval={"epochs": 200})
        out["model"] = {"proj_hidden": 2048, "proj_dim": 128, "reg_hidden": 2048}
    else:
        out.update(batch_size=64, epochs=20, warmup_epochs=2, eval={"epochs": 50})
    return out


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _from_dict(cls, raw: dict, path: str = ""):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {[path + k for k in unknown]}")
    kwargs = {}
    for name, value in raw.items():
        f = known[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _from_dict(type(default), value, path + name + ".")
        elif isinstance(default, float) and isinstance(value, (str, int)) and not isinstance(value, bool):
            # YAML 1.1 reads "1e-3" as a string
            try:
                kwargs[name] = float(value)
            except ValueError as exc:
                raise ConfigError(f"{path + name} expects a number, got {value!r}") from exc
        else:
            kwargs[name] = value
    return cls(**kwargs)


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, value = text.split("=", 1)
    return key.strip().split("."), yaml.safe_load(value)


def _apply(tree: dict, keys: list[str], value) -> None:
    node = tree
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {'.'.join(keys)}: {key} is not a section")
    node[keys[-1]] = value


def build_config(file_values: dict | None = None, overrides: list[str] = ()) -> ExperimentConfig:
    """Combine preset defaults, file values and ``key=value`` overrides, then validate."""
    layered: dict = dict(file_values or {})
    parsed = [parse_override(o) for o in overrides]
    for keys, value in parsed:
        _apply(layered, keys, value)
    method = layered.get("method", "simclr")
    preset = layered.get("preset", "desk")
    merged = _merge(preset_defaults(method, preset), layered)
    return _from_dict(ExperimentConfig, merged).validate()


def load_config(path: str | Path | None, overrides: list[str] = ()) -> ExperimentConfig:
    values = {}
    if path is not None:
        try:
            values = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return build_config(values, overrides)


def config_from_dict(raw: dict) -> ExperimentConfig:
    return _from_dict(ExperimentConfig, raw).validate()
