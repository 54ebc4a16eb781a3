"""Experiment configuration: nested sections, JSON files, env overrides.

A config file is a JSON object whose top-level keys are section names; every
key inside a section must match a field of that section's dataclass (unknown
keys are rejected, missing keys fall back to the documented defaults).
Environment variables of the form ``MUVO_<SECTION>_<KEY>`` override file
values; their payload is parsed as JSON when possible, else taken as a
string. The fully resolved config is echoed into each run directory.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .affinity import AffinityConfig
from .augment import AugmentConfig
from .data import DatasetSpec
from .exceptions import InvalidConfigError
from .trainer import TrainConfig

ENV_PREFIX = "MUVO_"


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 64
    feature_dim: int = 32
    activation: str = "relu"
    base_lr: float = 0.01
    sgd_momentum: float = 0.9
    lr_gamma: float = 1e-4
    lr_beta: float = 0.75

    def __post_init__(self):
        if self.hidden_dim < 1 or self.feature_dim < 1:
            raise InvalidConfigError("model dims must be >= 1")
        if self.base_lr <= 0:
            raise InvalidConfigError("base_lr must be > 0")
        if not 0.0 <= self.sgd_momentum < 1.0:
            raise InvalidConfigError("sgd_momentum must be in [0, 1)")


@dataclass(frozen=True)
class DebiasConfig:
    factor: float = 0.2      # strength of the +/- log-confidence logit shift
    threshold: float = 0.95  # pseudo-label confidence gate

    def __post_init__(self):
        if self.factor < 0:
            raise InvalidConfigError("debias factor must be >= 0")
        if not 0.0 < self.threshold <= 1.0:
            raise InvalidConfigError("threshold must be in (0, 1]")


@dataclass(frozen=True)
class NegativeConfig:
    m: int = 2  # pseudo-negative labels drawn per sample

    def __post_init__(self):
        if self.m < 1:
            raise InvalidConfigError("negative.m must be >= 1")


@dataclass(frozen=True)
class BankConfig:
    momentum: float = 0.999
    use_raw_probs: bool = True        # raw instead of debiased statistics
    stat_mode: str = "class_mean"     # or "argmax_mean"

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidConfigError("bank.momentum must be in [0, 1)")
        if self.stat_mode not in ("argmax_mean", "class_mean"):
            raise InvalidConfigError(f"unknown stat_mode '{self.stat_mode}'")


@dataclass(frozen=True)
class OutputConfig:
    save_best: bool = True
    save_final: bool = True


_SECTIONS = {
    "data": DatasetSpec,
    "model": ModelConfig,
    "augment": AugmentConfig,
    "debias": DebiasConfig,
    "negative": NegativeConfig,
    "bank": BankConfig,
    "affinity": AffinityConfig,
    "trainer": TrainConfig,
    "output": OutputConfig,
}


@dataclass(frozen=True)
class ExperimentConfig:
    data: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    debias: DebiasConfig = field(default_factory=DebiasConfig)
    negative: NegativeConfig = field(default_factory=NegativeConfig)
    bank: BankConfig = field(default_factory=BankConfig)
    affinity: AffinityConfig = field(default_factory=AffinityConfig)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> dict:
        out = {}
        for name in _SECTIONS:
            section = dataclasses.asdict(getattr(self, name))
            for k, v in section.items():
                if isinstance(v, tuple):
                    section[k] = list(v)
            out[name] = section
        return out

    def replace_section(self, name: str, **updates) -> "ExperimentConfig":
        """New config with one section's fields replaced."""
        section = dataclasses.replace(getattr(self, name), **updates)
        return dataclasses.replace(self, **{name: section})


def _coerce(cls, key, value):
    # JSON has no tuples; dataclass fields that expect them get lists.
    ftypes = {f.name: f.type for f in dataclasses.fields(cls)}
    if isinstance(value, list) and "tuple" in str(ftypes.get(key, "")):
        return tuple(value)
    return value


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build a validated config from a nested dict, rejecting unknown keys."""
    if not isinstance(raw, dict):
        raise InvalidConfigError("config root must be a JSON object")
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise InvalidConfigError(f"unknown config section(s): {sorted(unknown)}")
    sections = {}
    for name, cls in _SECTIONS.items():
        body = raw.get(name, {})
        if not isinstance(body, dict):
            raise InvalidConfigError(f"section '{name}' must be an object")
        known = {f.name for f in dataclasses.fields(cls)}
        bad = set(body) - known
        if bad:
            raise InvalidConfigError(
                f"unknown key(s) in section '{name}': "
                f"{sorted(name + '.' + k for k in bad)}")
        kwargs = {k: _coerce(cls, k, v) for k, v in body.items()}
        try:
            sections[name] = cls(**kwargs)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, InvalidConfigError):
                raise
            raise InvalidConfigError(f"section '{name}': {exc}") from exc
    return ExperimentConfig(**sections)


def apply_env_overrides(raw: dict, environ=None) -> dict:
    """Fold MUVO_<SECTION>_<KEY> environment variables into a raw config dict."""
    environ = os.environ if environ is None else environ
    out = {k: dict(v) for k, v in raw.items() if isinstance(v, dict)}
    for name in sorted(environ):
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):]
        if "_" not in rest:
            raise InvalidConfigError(
                f"{name}: expected {ENV_PREFIX}<SECTION>_<KEY>")
        section, key = rest.split("_", 1)
        section, key = section.lower(), key.lower()
        if section not in _SECTIONS:
            raise InvalidConfigError(f"{name}: unknown section '{section}'")
        value = environ[name]
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            pass  # plain strings (e.g. activation names) arrive unquoted
        out.setdefault(section, {})[key] = value
    return out


def load_config(path=None, environ=None) -> ExperimentConfig:
    """Resolve defaults <- file <- environment into a validated config."""
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise InvalidConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise InvalidConfigError(f"malformed JSON in {path}: {exc}") from exc
    raw = apply_env_overrides(raw, environ)
    return config_from_dict(raw)


def write_resolved_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2) + "\n",
                          encoding="utf-8")
