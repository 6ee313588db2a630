"""Experiment configuration: YAML in, validated dataclasses out.

Validation walks the dataclass type hints, so errors carry a dotted path to
the offending field (``pretrain.loss.head: ...``).
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .backbones import BackboneSpec
from .errors import CassValidationError, ConfigError
from .finetune import FinetuneConfig
from .pretrain import PretrainConfig
from .reports import digest_of

BASELINES = ("dino", "supervised", "none")


@dataclass
class DatasetConfig:
    source: str = "synthetic"
    n: int = 256
    classes: int = 3
    image_size: int = 64
    noise: float = 0.15
    seed: int = 0
    class_weights: list[float] | None = None
    root: str | None = None
    manifest: str | None = None
    split_manifest: str | None = None

    def __post_init__(self):
        if self.source not in ("synthetic", "folder"):
            raise ConfigError("must be 'synthetic' or 'folder'", path="dataset.source")
        if self.source == "folder" and not self.root:
            raise ConfigError("folder datasets need a root", path="dataset.root")


def _default_backbones():
    return {
        "a": BackboneSpec("conv", "tiny-conv4", 64, None, 32),
        "b": BackboneSpec("attention", "tiny-vit2", 64, 16, 32),
    }


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    backbones: dict[str, BackboneSpec] = field(default_factory=_default_backbones)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    label_fractions: list[float] = field(default_factory=lambda: [0.01, 0.1, 1.0])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    baselines: list[str] = field(default_factory=lambda: ["none"])
    metric: str = "f1"
    spread: str = "variance"
    output_dir: str = "runs"

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("must not be empty", path="seeds")
        if set(self.backbones) != {"a", "b"}:
            raise ConfigError("expected entries 'a' and 'b'", path="backbones")
        for b in self.baselines:
            if b not in BASELINES:
                raise ConfigError(f"unknown baseline {b!r}", path="baselines")
        if self.metric not in ("f1", "balanced_accuracy"):
            raise ConfigError("must be 'f1' or 'balanced_accuracy'", path="metric")
        if self.spread not in ("variance", "std"):
            raise ConfigError("must be 'variance' or 'std'", path="spread")
        for i, f in enumerate(self.label_fractions):
            if not 0 < f <= 1:
                raise ConfigError("must be in (0, 1]", path=f"label_fractions[{i}]")
        for k, spec in self.backbones.items():
            try:
                spec.validate()
            except CassValidationError as exc:
                raise ConfigError(str(exc), path=f"backbones.{k}") from None

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return digest_of(self.to_dict())


def _coerce(tp, value, path):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        errors = []
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(a, value, path)
            except ConfigError as exc:
                errors.append(exc)
        raise errors[0] if errors else ConfigError("null not allowed", path=path)
    if dataclasses.is_dataclass(tp):
        return from_mapping(tp, value, path)
    if origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"expected a list, got {type(value).__name__}", path=path)
        item = args[0] if args else typing.Any
        out = [_coerce(item, v, f"{path}[{i}]") for i, v in enumerate(value)]
        return tuple(out) if origin is tuple else out
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"expected a mapping, got {type(value).__name__}", path=path)
        return {k: _coerce(args[1], v, f"{path}.{k}") for k, v in value.items()}
    if tp is typing.Any:
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", path=path)
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", path=path)
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", path=path)
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", path=path)
        return value
    return value


def from_mapping(cls, data, path: str = ""):
    """Build dataclass ``cls`` from nested dicts, validating types and names."""
    if isinstance(data, cls):
        return data
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping, got {type(data).__name__}", path=path or None)
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown field(s) {unknown}", path=path or None)
    kwargs = {k: _coerce(hints[k], v, f"{path}.{k}" if path else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        if exc.path and path and not exc.path.startswith(path):
            raise ConfigError(str(exc).split(": ", 1)[-1], path=f"{path}.{exc.path.split('.')[-1]}") from None
        raise
    except (CassValidationError, TypeError) as exc:
        raise ConfigError(str(exc), path=path or None) from None


def load_config(path) -> ExperimentConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"YAML parse error: {exc}") from None
    return from_mapping(ExperimentConfig, data or {})


def dump_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    return path
