"""Run configuration: one JSON document with one section per subsystem.

Unknown keys are rejected with a JSON pointer to the offender, e.g.
``/train/lr_rate``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any

from .core import ValidationError
from .datapipe import AugmentationConfig
from .inference import DEFAULT_BANK, bank_to_json, parse_bank
from .model import ModelConfig
from .synthgen import SynthConfig
from .training import TrainConfig

TOGGLES = ("separate_classifier", "reweighting", "mixup", "tta")


class ConfigError(ValueError):
    def __init__(self, pointer: str, message: str):
        super().__init__(f"{pointer}: {message}")
        self.pointer = pointer


@dataclass
class TTAConfig:
    enabled: bool = False
    merge: str = "geometric"
    bank: list = field(default_factory=lambda: bank_to_json(DEFAULT_BANK))

    def validate(self) -> None:
        if self.merge not in ("geometric", "arithmetic"):
            raise ValidationError("merge must be 'geometric' or 'arithmetic'")
        parse_bank(self.bank)

    def transforms(self):
        return parse_bank(self.bank)


@dataclass
class EnsembleConfig:
    mode: str = "class_wise"
    k: int | None = None  # None: 3 for class_wise, all models for model_wise

    def validate(self) -> None:
        if self.mode not in ("class_wise", "model_wise"):
            raise ValidationError("mode must be 'class_wise' or 'model_wise'")
        if self.k is not None and self.k < 1:
            raise ValidationError("k must be >= 1")


@dataclass
class AblateConfig:
    toggles: list = field(default_factory=lambda: list(TOGGLES))
    upweight_k: int = 9
    upweight_factor: float = 2.0
    mixup_alpha: float = 4.0

    def validate(self) -> None:
        unknown = [t for t in self.toggles if t not in TOGGLES]
        if unknown:
            raise ValidationError(f"unknown toggles {unknown}; expected a subset of {list(TOGGLES)}")
        if len(set(self.toggles)) != len(self.toggles):
            raise ValidationError("toggles must not repeat")
        if self.upweight_k < 0 or self.upweight_factor <= 0 or self.mixup_alpha <= 0:
            raise ValidationError("upweight_k >= 0, upweight_factor > 0 and mixup_alpha > 0 required")


@dataclass
class PathsConfig:
    data_dir: str = "data"
    run_dir: str = "run"
    embeddings: str | None = None
    class_weights: str | None = None

    def validate(self) -> None:
        pass


SECTIONS = {
    "synth": SynthConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "augment": AugmentationConfig,
    "tta": TTAConfig,
    "ensemble": EnsembleConfig,
    "ablate": AblateConfig,
    "paths": PathsConfig,
}


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    tta: TTAConfig = field(default_factory=TTAConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _check_type(value, default, pointer):
    if default is None or value is None:
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(pointer, f"expected {type(default).__name__}, got {json.dumps(value)}")


def _build_section(cls, data: Any, pointer: str):
    if not isinstance(data, dict):
        raise ConfigError(pointer, "expected an object")
    instance = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"{pointer}/{key}", f"unknown key '{key}'")
        _check_type(value, getattr(instance, key), f"{pointer}/{key}")
        if isinstance(getattr(instance, key), float) and isinstance(value, int):
            value = float(value)
        setattr(instance, key, value)
    try:
        instance.validate()
    except ValidationError as exc:
        raise ConfigError(pointer, str(exc)) from exc
    return instance


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("", "config must be a JSON object")
    sections = {}
    for key, value in data.items():
        if key not in SECTIONS:
            raise ConfigError(f"/{key}", f"unknown key '{key}'")
        sections[key] = _build_section(SECTIONS[key], value, f"/{key}")
    return RunConfig(**sections)


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings; values parse as JSON, else as plain strings."""
    data = json.loads(json.dumps(data))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError("", f"override '{item}' is not of the form section.key=value")
        path, raw = item.split("=", 1)
        parts = path.split(".")
        if len(parts) != 2:
            raise ConfigError("/" + path.replace(".", "/"), "override key must be section.key")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        data.setdefault(parts[0], {})
        if not isinstance(data[parts[0]], dict):
            raise ConfigError(f"/{parts[0]}", "expected an object")
        data[parts[0]][parts[1]] = value
    return data


def load_config(path=None, overrides=None) -> RunConfig:
    data = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError("", f"invalid JSON: {exc}") from exc
    return config_from_dict(apply_overrides(data, overrides))


def describe_keys(sections) -> str:
    """Help text listing every key of the given sections with its default."""
    lines = ["config keys consumed:"]
    defaults = RunConfig()
    for section in sections:
        obj = getattr(defaults, section)
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            shown = json.dumps(value) if not isinstance(value, list) or len(json.dumps(value)) < 40 else "[...]"
            lines.append(f"  {section}.{f.name} (default {shown})")
    return "\n".join(lines)
