"""Resolved run configuration: command-line flags over config file over defaults."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from .dataset import SplitFractions, SplitMode
from .model import LinkNetConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid or unparseable configuration (a usage error, exit code 2)."""


@dataclass
class RunConfig:
    # paths
    data: str | None = None
    annotations: str | None = None
    out: str = "runs/default"
    split: str | None = None
    manifest: str | None = None
    # splitting
    mode: str = "single"
    seed: int = 0
    train_count: int | None = None  # None with train_frac None: 2100 single / 900 per view
    train_frac: float | None = None
    val_frac: float = 0.2
    patient_disjoint: bool = False
    subset: str = "test"
    # preprocessing
    target_size: int = 256
    # model
    encoder_filters: list[int] = field(default_factory=lambda: [64, 128, 256, 512])
    head_channels: int = 32
    # training
    learning_rate: float = 1e-3
    batch_size: int = 8
    max_epochs: int = 100
    patience: int = 10
    clamp_epsilon: float = 1e-7
    concat_prior: bool = False
    device: str = "cpu"
    # evaluation
    threshold: float = 0.5
    native_resolution: bool = False
    # phantom
    phantom_n: int = 300
    phantom_size: int = 64
    # report inputs
    single_eval: str | None = None
    per_view_eval: str | None = None
    jobs: int = 1

    def validate(self) -> "RunConfig":
        if self.mode not in ("single", "per-view"):
            raise ConfigError(f"mode must be 'single' or 'per-view', got {self.mode!r}")
        if self.target_size <= 0 or self.target_size % 32:
            raise ConfigError(f"target_size {self.target_size} must be a positive multiple of 32")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold {self.threshold} outside [0, 1]")
        if self.train_count is not None and self.train_frac is not None:
            raise ConfigError("set at most one of train_count and train_frac")
        if self.train_frac is not None and not 0.0 < self.train_frac <= 1.0:
            raise ConfigError(f"train_frac {self.train_frac} outside (0, 1]")
        if not 0.0 <= self.val_frac < 1.0:
            raise ConfigError(f"val_frac {self.val_frac} outside [0, 1)")
        if self.subset not in ("train", "val", "test", "all"):
            raise ConfigError(f"subset must be train, val, test or all, got {self.subset!r}")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        try:
            self.model_config()
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    @property
    def split_mode(self) -> SplitMode:
        return SplitMode(self.mode)

    def fractions(self) -> SplitFractions:
        train = self.train_count if self.train_frac is None else float(self.train_frac)
        return SplitFractions(train, self.val_frac, self.patient_disjoint)

    def model_config(self) -> LinkNetConfig:
        return LinkNetConfig(
            in_channels=2 if self.concat_prior else 1,
            encoder_filters=tuple(self.encoder_filters),
            head_channels=self.head_channels,
            init_seed=self.seed,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            threshold=self.threshold,
            seed=self.seed,
            clamp_epsilon=self.clamp_epsilon,
            concat_prior=self.concat_prior,
            device=self.device,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")


_FIELDS = {f.name: f for f in fields(RunConfig)}


_OPTIONAL_TYPES = {"train_count": int, "train_frac": float}


def _to_bool(value: Any) -> bool:
    if isinstance(value, str):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(value)
    return bool(value)


def _coerce(name: str, value: Any) -> Any:
    if value is None:
        return None
    if name == "encoder_filters":
        if isinstance(value, str):
            value = value.replace(",", " ").split()
        return [int(v) for v in value]
    default = _FIELDS[name].default
    if default is None:
        return _OPTIONAL_TYPES.get(name, str)(value)
    if isinstance(default, bool):
        return _to_bool(value)
    if isinstance(default, int) and isinstance(value, float) and not value.is_integer():
        raise ValueError(value)
    return type(default)(value)


def _merge(cfg: dict, updates: Mapping[str, Any], source: str) -> None:
    for key, value in updates.items():
        name = key.replace("-", "_")
        if name not in _FIELDS:
            raise ConfigError(f"{source}: unknown config key {key!r}")
        try:
            cfg[name] = _coerce(name, value)
        except (TypeError, ValueError):
            raise ConfigError(f"{source}: invalid value {value!r} for {key!r}") from None


def load_config(path: str | os.PathLike | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Defaults, then the YAML/JSON file at ``path``, then ``overrides``."""
    cfg = RunConfig().to_dict()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: cannot parse config ({exc})") from exc
        if doc is None:
            doc = {}
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a key-value mapping")
        _merge(cfg, doc, str(path))
    flags = {k.replace("-", "_"): v for k, v in (overrides or {}).items() if v is not None}
    # train_count and train_frac are alternatives; a flag for one displaces the file's other
    if "train_count" in flags:
        cfg["train_frac"] = None
    if "train_frac" in flags:
        cfg["train_count"] = None
    _merge(cfg, flags, "command line")
    return RunConfig(**cfg).validate()
