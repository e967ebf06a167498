"""Experiment configuration and strict JSON loading.

Unknown keys are rejected and every error names the offending key path
(e.g. ``sa.quant.bits``), so typos in sweep files fail loudly.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import SynthConfig
from .model import ModelSpec, Stage
from .quant import QuantSpec
from .suggest import SelectionConfig


class ConfigError(ValueError):
    pass


@dataclass
class NTConfig:
    n_models: int = 1
    epochs: int = 20
    lr: float = 0.0005
    lr_drop_epoch: int = 10**9
    quant: QuantSpec = field(default_factory=QuantSpec)
    seeds: list[int] = field(default_factory=lambda: [0])


@dataclass
class EvalConfig:
    min_object_px: int = 0
    threshold: float = 0.5


@dataclass
class SweepConfig:
    sa: list[QuantSpec] = field(default_factory=list)
    nt: list[QuantSpec] = field(default_factory=list)


@dataclass
class ExperimentConfig:
    # a manifest path, one SynthConfig, or a list of them (e.g. an easy and a hard part)
    dataset: typing.Union[str, SynthConfig, list[SynthConfig]] = field(default_factory=SynthConfig)
    split: list[float] = field(default_factory=lambda: [0.5, 0.0, 0.5])
    split_seed: int = 0
    model: ModelSpec = field(default_factory=ModelSpec)
    sa: SelectionConfig = field(default_factory=SelectionConfig)
    nt: NTConfig = field(default_factory=NTConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs/default"
    sweep: typing.Optional[SweepConfig] = None

    def validate(self):
        if self.nt.n_models < 1:
            raise ConfigError("nt.n_models must be >= 1")
        if len(self.nt.seeds) != self.nt.n_models:
            raise ConfigError(f"nt.seeds has {len(self.nt.seeds)} entries for nt.n_models={self.nt.n_models}")
        if self.nt.epochs < 0:
            raise ConfigError("nt.epochs must be >= 0")
        for where, q in [("sa.quant", self.sa.quant), ("nt.quant", self.nt.quant)]:
            try:
                q.validate()
            except ValueError as e:
                raise ConfigError(f"{where}: {e}") from None
        try:
            self.model.validate()
        except ValueError as e:
            raise ConfigError(f"model: {e}") from None


def _type_name(tp) -> str:
    return getattr(tp, "__name__", str(tp))


def _convert(tp, value, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        errors = []
        # try dataclasses last so a plain string is not mistaken for an object
        for option in sorted((a for a in args if a is not type(None)), key=dataclasses.is_dataclass):
            try:
                return _convert(option, value, path)
            except ConfigError as e:
                errors.append(str(e))
        raise ConfigError(f"{path}: value matches none of the allowed forms ({'; '.join(errors)})")
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path or '<root>'}: expected an object for {tp.__name__}, got {type(value).__name__}")
        return from_dict(tp, value, path)
    if origin in (list, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        inner = args[0] if args else typing.Any
        items = [_convert(inner, v, f"{path}[{i}]") for i, v in enumerate(value)]
        return items if origin is list else tuple(items)
    if tp is typing.Any:
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported field type {_type_name(tp)}")


def from_dict(cls, data: dict, path: str = ""):
    """Build dataclass ``cls`` from ``data``, rejecting unknown keys."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown key {where}{unknown[0]} (allowed: {', '.join(sorted(names))})")
    kwargs = {}
    for key, value in data.items():
        kwargs[key] = _convert(hints[key], value, f"{path}.{key}" if path else key)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path or '<root>'}: {e}") from None


def to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    return obj


def load_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: malformed JSON at line {e.lineno} column {e.colno}: {e.msg}") from None


def load_experiment(path) -> ExperimentConfig:
    data = load_json(path)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    cfg = from_dict(ExperimentConfig, data)
    cfg.validate()
    return cfg


def config_hash(cfg) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


__all__ = [
    "ConfigError", "EvalConfig", "ExperimentConfig", "NTConfig", "SweepConfig", "Stage",
    "config_hash", "from_dict", "load_experiment", "load_json", "to_dict",
]
