"""Run configuration files: one JSON document with a section per subsystem.

Unknown sections or keys are rejected outright, every field has a documented
default, and the fully materialized configuration is echoed into the run
directory so any run can be reproduced from its own artifacts.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import GenConfig
from .encoders import EncoderConfig
from .losses import LossConfig
from .roi import LocalizeConfig
from .training import TrainConfig

__all__ = ["RunConfig", "ConfigError", "load_run_config"]


class ConfigError(ValueError):
    """Malformed or unknown configuration content."""


_SECTIONS = {
    "data": GenConfig,
    "model": EncoderConfig,
    "train": TrainConfig,
    "loss": LossConfig,
    "localize": LocalizeConfig,
}


@dataclass
class RunConfig:
    data: GenConfig = field(default_factory=GenConfig)
    model: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    localize: LocalizeConfig = field(default_factory=LocalizeConfig)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in _SECTIONS}

    def echo(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1))


def _build_section(name: str, cls, payload: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"unknown keys in section '{name}': {sorted(unknown)}")
    try:
        return cls(**payload)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{name}' section: {exc}") from exc


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from defaults, an optional file, and flag overrides.

    Precedence: flags > file > defaults. `overrides` maps section name to a
    dict of field overrides.
    """
    document: dict = {}
    if path is not None:
        try:
            document = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(document, dict):
            raise ConfigError(f"{path}: top level must be an object")
        unknown = set(document) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    merged = {}
    for name, cls in _SECTIONS.items():
        payload = dict(document.get(name, {}))
        if overrides and name in overrides:
            payload.update({k: v for k, v in overrides[name].items() if v is not None})
        merged[name] = _build_section(name, cls, payload)
    return RunConfig(**merged)
