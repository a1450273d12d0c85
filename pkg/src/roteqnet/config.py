"""Run configuration: one JSON document with sections model, sgd, augment, data and run.

Unknown keys and ill-typed values are rejected with the JSON path of the
offending entry (``$.model.nf``).  Missing keys take their defaults, and
:meth:`RunConfig.to_dict` returns the fully materialised document.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import SyntheticShapesConfig
from .network import ModelConfig
from .serialization import canonical_json
from .train import AugmentConfig, SGDConfig

PRECISIONS = ("float32", "float64")


class ConfigError(ValueError):
    """Invalid configuration; ``path`` locates the failing entry."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message


@dataclass
class DataConfig:
    dir: str | None = None
    n_train: int = 200
    n_val: int = 50
    patch_size: int = 64
    tile_size: int = 64
    tile_stride: int = 64
    workers: int = 1
    synthetic: SyntheticShapesConfig = field(default_factory=SyntheticShapesConfig)

    def __post_init__(self):
        if self.n_train < 0 or self.n_val < 0:
            raise ValueError("split sizes must be non-negative")
        for name in ("patch_size", "tile_size"):
            if getattr(self, name) < 64 or getattr(self, name) % 64:
                raise ValueError(f"{name} must be a positive multiple of 64, got {getattr(self, name)}")
        if self.tile_stride < 1 or self.workers < 1:
            raise ValueError("tile_stride and workers must be >= 1")


@dataclass
class RunSection:
    seed: int = 0
    threads: int | None = None
    precision: str = "float32"
    eval_batch_size: int = 8

    def __post_init__(self):
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {PRECISIONS}, got {self.precision!r}")
        if self.threads is not None and self.threads < 1:
            raise ValueError(f"threads must be >= 1, got {self.threads}")
        if self.eval_batch_size < 1:
            raise ValueError("eval_batch_size must be >= 1")


_SECTIONS = {
    "model": ModelConfig,
    "sgd": SGDConfig,
    "augment": AugmentConfig,
    "data": DataConfig,
    "run": RunSection,
}


def _check_value(path: str, value, annotation):
    """Validate a JSON value against a (simple) type annotation."""
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _check_value(path, value, inner[0])
    if annotation is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if annotation is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if annotation is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if annotation is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if origin is list or annotation is list:
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        if args:
            return [_check_value(f"{path}[{i}]", v, args[0]) for i, v in enumerate(value)]
        return value
    return value


def _build(path: str, cls, data):
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}"
        if key not in fields:
            raise ConfigError(sub, f"unknown key; expected one of {sorted(fields)}")
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(sub, hint, value)
        elif cls is SGDConfig and key == "schedule":
            kwargs[key] = _schedule(sub, value)
        else:
            kwargs[key] = _check_value(sub, value, hint)
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(path, str(exc)) from None


def _schedule(path: str, value):
    if not isinstance(value, list) or not value:
        raise ConfigError(path, "expected a non-empty list of [epochs, lr, weight_decay] segments")
    out = []
    for i, seg in enumerate(value):
        if not isinstance(seg, list) or len(seg) != 3:
            raise ConfigError(f"{path}[{i}]", "expected [epochs, lr, weight_decay]")
        out.append(
            [
                _check_value(f"{path}[{i}][0]", seg[0], int),
                _check_value(f"{path}[{i}][1]", seg[1], float),
                _check_value(f"{path}[{i}][2]", seg[2], float),
            ]
        )
    return out


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    sgd: SGDConfig = field(default_factory=SGDConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    data: DataConfig = field(default_factory=DataConfig)
    run: RunSection = field(default_factory=RunSection)

    @classmethod
    def from_dict(cls, doc) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("$", f"expected an object, got {type(doc).__name__}")
        sections = {}
        for key, value in doc.items():
            if key not in _SECTIONS:
                raise ConfigError(f"$.{key}", f"unknown section; expected one of {sorted(_SECTIONS)}")
            sections[key] = _build(f"$.{key}", _SECTIONS[key], value)
        return cls(**sections)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("$", f"invalid JSON: {exc}") from None
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError("$", f"cannot read config {path}: {exc.strerror}") from None
        return cls.from_json(text)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return canonical_json(self.to_dict())
