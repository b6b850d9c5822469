"""One experiment = one flat, line-oriented configuration.

The whole experiment state serializes to sorted ``section.field=value``
lines (tuples comma-joined, ``none`` for absent optionals), so configs are
diffable, greppable, and overridable from the command line with the same
``key=value`` syntax. The config hash identifies an experiment while
ignoring ``output_dir``, which changes where results land but not what
they are.
"""

from __future__ import annotations

import hashlib
import types
import typing
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .corpus import CorpusSpec
from .errors import ConfigError
from .features import FeatureConfig
from .metrics import CollarConfig
from .postprocess import SmoothingConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class ExperimentConfig:
    corpus: CorpusSpec = CorpusSpec()
    features: FeatureConfig = FeatureConfig()
    train: TrainConfig = TrainConfig()
    smoothing: SmoothingConfig = SmoothingConfig()
    collars: CollarConfig = CollarConfig()
    pt_width: float = 1.0
    ps_width: float = 1.0
    repeats: int = 1
    output_dir: str = "runs"

    def validate(self) -> None:
        self.corpus.validate()
        self.features.validate()
        self.train.validate()
        self.smoothing.validate(n_classes=self.corpus.n_classes)
        self.collars.validate()
        if self.pt_width <= 0 or self.ps_width <= 0:
            raise ConfigError("model widths must be positive")
        if self.repeats < 1:
            raise ConfigError(f"repeats must be >= 1, got {self.repeats}")
        if not self.output_dir:
            raise ConfigError("output_dir must not be empty")


_SECTIONS = ("corpus", "features", "train", "smoothing", "collars")
_SCALARS = ("pt_width", "ps_width", "repeats", "output_dir")


def _encode_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_encode_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _decode_value(text: str, hint, key: str):
    origin = typing.get_origin(hint)
    if origin in (types.UnionType, typing.Union):
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if text.strip().lower() == "none":
            return None
        return _decode_value(text, args[0], key)
    if origin is tuple:
        args = typing.get_args(hint)
        parts = [p.strip() for p in text.split(",")] if text.strip() else []
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_decode_value(p, args[0], key) for p in parts)
        if len(parts) != len(args):
            raise ConfigError(f"{key}: expected {len(args)} comma-separated values, got {text!r}")
        return tuple(_decode_value(p, a, key) for p, a in zip(parts, args))
    if hint is bool:
        lowered = text.strip().lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    if hint is int:
        try:
            return int(text.strip())
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {text!r}") from None
    if hint is float:
        try:
            return float(text.strip())
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {text!r}") from None
    if hint is str:
        return text
    raise ConfigError(f"{key}: unsupported field type {hint!r}")


def flatten_config(config: ExperimentConfig) -> dict:
    """All settings as dotted-key strings."""
    flat = {}
    for section in _SECTIONS:
        sub = getattr(config, section)
        for f in fields(sub):
            flat[f"{section}.{f.name}"] = _encode_value(getattr(sub, f.name))
    for name in _SCALARS:
        flat[name] = _encode_value(getattr(config, name))
    return flat


def dump_config(config: ExperimentConfig) -> str:
    flat = flatten_config(config)
    return "\n".join(f"{key}={flat[key]}" for key in sorted(flat)) + "\n"


def apply_overrides(config: ExperimentConfig, assignments) -> ExperimentConfig:
    """Apply ``key=value`` strings (dotted keys for sections) to a config."""
    section_updates: dict = {name: {} for name in _SECTIONS}
    scalar_updates: dict = {}
    for raw in assignments:
        if "=" not in raw:
            raise ConfigError(f"expected key=value, got {raw!r}")
        key, text = raw.split("=", 1)
        key = key.strip()
        if "." in key:
            section, _, field_name = key.partition(".")
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section {section!r} in {key!r}")
            sub = getattr(config, section)
            hints = typing.get_type_hints(type(sub))
            if field_name not in hints:
                raise ConfigError(f"unknown config key {key!r}")
            section_updates[section][field_name] = _decode_value(text, hints[field_name], key)
        else:
            if key not in _SCALARS:
                raise ConfigError(f"unknown config key {key!r}")
            hints = typing.get_type_hints(ExperimentConfig)
            scalar_updates[key] = _decode_value(text, hints[key], key)
    rebuilt = {}
    for section, updates in section_updates.items():
        if updates:
            rebuilt[section] = replace(getattr(config, section), **updates)
    rebuilt.update(scalar_updates)
    return replace(config, **rebuilt) if rebuilt else config


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse dumped lines; blank lines and #-comments are ignored."""
    assignments = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {stripped!r}")
        assignments.append(stripped)
    return apply_overrides(base or ExperimentConfig(), assignments)


def load_config_file(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no config file at {path}")
    return parse_config(path.read_text(), base=base)


def save_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(dump_config(config))


def config_hash(config: ExperimentConfig) -> str:
    """Hash of everything except where the results are written."""
    lines = [
        line for line in dump_config(config).splitlines() if not line.startswith("output_dir=")
    ]
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:16]
