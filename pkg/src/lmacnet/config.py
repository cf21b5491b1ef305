"""Run configuration: one JSON document with data/model/losses/optim/output sections.

Unknown keys anywhere are rejected (misspelled options must not fall back
to defaults silently), and the fully resolved document is echoed next to
the run outputs so any run can be reproduced from its own artifacts.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import SyntheticSpec
from .losses import LossConfig
from .model import ModelConfig
from .training import OptimConfig


class ConfigError(Exception):
    pass


@dataclass
class TrainSettings(OptimConfig):
    seed: int = 0


@dataclass
class OutputConfig:
    log_out: str | None = None          # default: {out}/log.jsonl
    ckpt_dir: str | None = None         # default: {out}/checkpoints
    breakdown_out: str | None = None    # default: {out}/breakdowns.jsonl
    n_tracked_samples: int = 3


_SECTIONS = {
    "data": SyntheticSpec,
    "model": ModelConfig,
    "losses": LossConfig,
    "optim": TrainSettings,
    "output": OutputConfig,
}


@dataclass
class RunConfig:
    data: SyntheticSpec
    model: ModelConfig
    losses: LossConfig
    optim: TrainSettings
    output: OutputConfig

    def resolved(self) -> dict:
        doc = {}
        for name in _SECTIONS:
            section = dataclasses.asdict(getattr(self, name))
            for key, value in section.items():
                if isinstance(value, tuple):
                    section[key] = list(value)
            doc[name] = section
        return doc

    def echo(self, out_dir) -> Path:
        path = Path(out_dir) / "config.resolved.json"
        path.write_text(json.dumps(self.resolved(), indent=2, sort_keys=True) + "\n")
        return path


def _build_section(name: str, cls, values: dict):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s) in section '{name}': {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{name}' section: {exc}") from exc


def resolve_config(document: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Merge a user document and dotted overrides over the defaults.

    `overrides` maps "section.key" to a raw value, e.g.
    {"losses.consistency": False, "model.fusion": "summation"}.
    """
    document = dict(document or {})
    unknown = sorted(set(document) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    merged = {name: dict(document.get(name) or {}) for name in _SECTIONS}
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if section not in _SECTIONS or not key:
            raise ConfigError(f"override {dotted!r} is not of the form section.key")
        merged[section][key] = value
    sections = {name: _build_section(name, cls, merged[name]) for name, cls in _SECTIONS.items()}
    return RunConfig(**sections)


def parse_override_value(raw: str):
    """CLI override values: JSON when possible, comma-split lists, else string."""
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        if "," in raw:
            return [part.strip() for part in raw.split(",") if part.strip()]
        return raw


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        document = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(document, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return document


def load_synthetic_spec(path=None) -> SyntheticSpec:
    """A gen-synthetic spec file is just the 'data' section on its own."""
    values = load_config_file(path) if path else {}
    return _build_section("data", SyntheticSpec, values)
