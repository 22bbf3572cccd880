"""Flat key=value run configuration shared by every CLI verb.

File format: one ``key = value`` per line, ``#`` starts a comment, blank
lines ignored.  Values are parsed with the type of the field's default.
Command-line flags override file values.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

from .model import MECHANISMS, ModelConfig
from .train import TrainConfig

TASK_BACKBONE = {"mnist": "mnist_small", "cifar": "cifar_cnn"}
TASK_CLASSES = {"mnist": 2, "cifar": 3}


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("\n".join(self.errors))


@dataclass
class RunConfig:
    task: str = "mnist"
    data_dir: str = "data"
    out_dir: str = "runs/default"
    manifest: Optional[str] = None
    attention: str = "agp"
    feature_dim: int = 64
    inducing_count: int = 64
    gp_input_dim: int = 32
    gp_activation: str = "sigmoid"
    attention_hidden: int = 32
    mc_samples: int = 20
    jitter: float = 1e-6
    seed: int = 1
    lr: float = 1e-4
    epochs: int = 5
    lr_decay: str = "none"
    decay_rate: float = 0.1
    decay_start: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: Optional[float] = None
    class_balanced: bool = False
    log_every: int = 1000
    max_train_bags: Optional[int] = None
    eval_split: str = "test"

    def validate(self) -> list:
        errors = []
        if self.task not in TASK_BACKBONE:
            errors.append(f"task must be one of {sorted(TASK_BACKBONE)}, got {self.task!r}")
        if self.attention not in MECHANISMS:
            errors.append(f"attention must be one of {list(MECHANISMS)}, got {self.attention!r}")
        if self.gp_activation not in ("sigmoid", "tanh", "relu"):
            errors.append(f"gp_activation must be sigmoid, tanh or relu, got {self.gp_activation!r}")
        for name in ("feature_dim", "inducing_count", "gp_input_dim", "attention_hidden", "mc_samples"):
            if getattr(self, name) < 1:
                errors.append(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.jitter > 0:
            errors.append(f"jitter must be > 0, got {self.jitter}")
        if self.max_train_bags is not None and self.max_train_bags < 1:
            errors.append(f"max_train_bags must be >= 1, got {self.max_train_bags}")
        if self.eval_split not in ("train", "val", "test"):
            errors.append(f"eval_split must be train, val or test, got {self.eval_split!r}")
        if self.task == "mnist" and self.eval_split == "val":
            errors.append("the mnist task has no val split")
        errors.extend(self.train_config(check=False).validate())
        return errors

    def check(self) -> "RunConfig":
        errors = self.validate()
        if errors:
            raise ConfigError(errors)
        return self

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            backbone=TASK_BACKBONE[self.task],
            feature_dim=self.feature_dim,
            attention=self.attention,
            num_classes=TASK_CLASSES[self.task],
            inducing_count=self.inducing_count,
            gp_input_dim=self.gp_input_dim,
            mc_samples=self.mc_samples,
            jitter=self.jitter,
            seed=self.seed,
            gp_activation=self.gp_activation,
            attention_hidden=self.attention_hidden,
        )

    def train_config(self, check=True) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            epochs=self.epochs,
            lr_decay=self.lr_decay,
            decay_rate=self.decay_rate,
            decay_start=self.decay_start,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            seed=self.seed,
            log_every=self.log_every,
            checkpoint_dir=self.out_dir,
            clip_norm=self.clip_norm,
            class_balanced=self.class_balanced,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


_FIELDS = {f.name: f for f in fields(RunConfig)}
_DEFAULTS = RunConfig()
_OPTIONAL = {"manifest", "clip_norm", "max_train_bags"}


def _parse_value(key: str, text: str):
    default = getattr(_DEFAULTS, key)
    text = text.strip()
    if key in _OPTIONAL and text.lower() in ("none", "null", ""):
        return None
    if not text or (text.lower() in ("none", "null") and not isinstance(default, str)):
        raise ValueError(f"{key}: a value is required")
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float) or key == "clip_norm":
        return float(text)
    if key == "max_train_bags":
        return int(text)
    return text


def parse_pairs(pairs: dict) -> tuple:
    """Typed values for known keys plus a list of errors (unknown keys, bad values)."""
    values, errors = {}, []
    for key, raw in pairs.items():
        if key not in _FIELDS:
            errors.append(f"unknown config key {key!r}")
            continue
        try:
            values[key] = _parse_value(key, raw) if isinstance(raw, str) else raw
        except ValueError as err:
            errors.append(f"bad value for {key}: {err}")
    return values, errors


def read_config_file(path) -> dict:
    pairs = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError([f"{path}:{lineno}: expected 'key = value'"])
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def resolve(file_path=None, overrides: Optional[dict] = None) -> RunConfig:
    """File values, then overrides; every problem is reported in one ConfigError."""
    errors = []
    values = {}
    if file_path is not None:
        file_values, errs = parse_pairs(read_config_file(file_path))
        values.update(file_values)
        errors.extend(errs)
    if overrides:
        over, errs = parse_pairs({k: v for k, v in overrides.items() if v is not None})
        values.update(over)
        errors.extend(errs)
    if errors:
        raise ConfigError(errors)
    cfg = RunConfig(**values)
    return cfg.check()


def write_config_file(cfg: RunConfig, path) -> None:
    lines = [f"{k} = {'none' if v is None else v}" for k, v in cfg.to_dict().items()]
    Path(path).write_text("\n".join(lines) + "\n")
