"""Experiment configuration: YAML/JSON files, named presets and dotted ``--key=value`` overrides."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import yaml

from .errors import ConfigError
from .model import VARIANTS, ModelConfig, config_from_dict
from .training import TrainConfig, train_config_from_dict

# Suggested settings per benchmark (dropout, embedding width, depth), plus the
# preprocessing switches used for OT (raw scaling) and the HO/DI label rescaling.
PRESETS: dict[str, dict[str, Any]] = {
    "HI": {"model": {"dropout": 0.25, "d": 256, "depth": 4}},
    "AD": {"model": {"dropout": 0.1, "d": 16, "depth": 3}},
    "OT": {"model": {"dropout": 0.25, "d": 192, "depth": 5}, "data": {"scale_numeric": False}},
    "HE": {"model": {"dropout": 0.25, "d": 96, "depth": 7}},
    "JA": {"model": {"dropout": 0.25, "d": 192, "depth": 4}},
    "YE": {"model": {"dropout": 0.25, "d": 128, "depth": 6}},
    "DI": {"model": {"dropout": 0.1, "d": 96, "depth": 4}, "data": {"label_scale": 1e2}},
    "HO": {"model": {"dropout": 0.125, "d": 128, "depth": 4}, "data": {"label_scale": 1e-4}},
    "toy": {
        "model": {"dropout": 0.0, "d": 16, "depth": 2, "heads": 4},
        "train": {"batch_size": 64, "lr_base": 3e-3, "max_epochs": 200},
    },
}


@dataclass
class DataConfig:
    path: str | None = None
    schema: str | None = None
    synthetic: dict | None = None  # {kind, n_rows, seed}
    split_seed: int = 0
    scale_numeric: bool = True
    label_scale: float = 1.0


@dataclass
class OutputConfig:
    checkpoint: str = "stab.ckpt"
    history: str = "history.jsonl"


@dataclass
class ExperimentConfig:
    variant: str = "full"
    preset: str | None = None
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        exp = cls(
            variant=raw.get("variant", "full"),
            preset=raw.get("preset"),
            seed=int(raw.get("seed", 0)),
            model=config_from_dict(raw.get("model") or {}),
            train=train_config_from_dict(raw.get("train") or {}),
            data=_section(DataConfig, raw.get("data") or {}, "data"),
            output=_section(OutputConfig, raw.get("output") or {}, "output"),
        )
        if exp.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {exp.variant!r}; allowed: {', '.join(VARIANTS)}")
        # one seed drives initialization, shuffling and sampling
        exp.model.init_seed = exp.seed
        exp.train.seed = exp.seed
        exp.train.validate()
        return exp


def _section(cls, raw: dict, prefix: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {prefix!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(f'{prefix}.{k}' for k in unknown)}")
    return cls(**raw)


def _merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_override(text: str) -> tuple[list[str], Any]:
    """``--train.max_epochs=10`` -> (["train", "max_epochs"], 10)."""
    body = text[2:] if text.startswith("--") else text
    if "=" not in body:
        raise ConfigError(f"override {text!r} must look like --section.key=value")
    key, value = body.split("=", 1)
    path = [p for p in key.split(".") if p]
    if not path:
        raise ConfigError(f"override {text!r} has an empty key")
    return path, _scalar(yaml.safe_load(value)) if value != "" else None


def _scalar(value: Any) -> Any:
    # YAML 1.1 leaves exponent forms without a dot ("5e-4") as strings
    if isinstance(value, str):
        try:
            number = float(value)
        except ValueError:
            return value
        if math.isfinite(number):
            return number
    return value


def apply_overrides(raw: dict, overrides: Sequence[str]) -> dict:
    out = copy.deepcopy(raw)
    for text in overrides:
        path, value = parse_override(text)
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r}: {part!r} is not a section")
        node[path[-1]] = value
    return out


def build_config(raw: dict, overrides: Sequence[str] = ()) -> ExperimentConfig:
    """Layer defaults < preset < file contents < overrides."""
    merged = apply_overrides(raw or {}, overrides)
    preset = merged.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; available: {', '.join(PRESETS)}")
        merged = _merge(PRESETS[preset], merged)
    return ExperimentConfig.from_dict(merged)


def load_config(path: str | Path, overrides: Sequence[str] = ()) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    base = Path(path).parent
    exp = build_config(raw, overrides)
    for attr in ("path", "schema"):
        value = getattr(exp.data, attr)
        if value is not None and not Path(value).is_absolute():
            setattr(exp.data, attr, str(base / value))
    return exp
