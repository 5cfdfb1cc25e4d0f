"""Run configuration: nested dataclasses, strict loading, dotted overrides."""
from __future__ import annotations

import dataclasses
import enum
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, List, Optional, Union

import yaml

from .difficulty import IndicatorKind
from .evaluation import DecodeConfig
from .idts import IdtsConfig, TemperatureMode
from .latf import LatfConfig
from .loss import DistillObjective, DivergenceKind
from .nn import ModelSpec


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message


@dataclass
class DataConfig:
    path: Optional[str] = None
    synthetic_examples: int = 2400
    synthetic_seed: int = 0
    varied_phrasing: bool = False
    validation_fraction: float = 0.1
    max_eval_examples: int = 200


@dataclass
class TeacherTrainConfig:
    steps: int = 1500
    batch_size: int = 32
    learning_rate: float = 2e-3
    seed: int = 0
    optimizer: str = "adam"


@dataclass
class DistillConfig:
    steps: int = 600
    batch_size: int = 16
    learning_rate: float = 2e-3
    optimizer: str = "adam"
    grad_accum: int = 1
    controller: str = "latf"          # latf | fixed | linear | cosine
    ratio: float = 1.0                # fixed ratio, or schedule start
    ratio_end: float = 0.75           # schedule end
    selection: str = "batch"          # batch | sequence
    indicator: IndicatorKind = IndicatorKind.HELLINGER
    topk: int = 5
    ema_init_batches: int = 32
    eval_every: int = 0
    checkpoint_every: int = 0
    sft_warmstart_steps: int = 0      # NLL steps on the student before distilling


@dataclass
class DistillRunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    tokenizer: str = "byte"
    teacher: ModelSpec = field(default_factory=lambda: ModelSpec(layer_count=4, head_count=4, model_width=128))
    student: ModelSpec = field(default_factory=lambda: ModelSpec(layer_count=2, head_count=4, model_width=64))
    teacher_training: TeacherTrainConfig = field(default_factory=TeacherTrainConfig)
    teacher_checkpoint: Optional[str] = None
    distill: DistillConfig = field(default_factory=DistillConfig)
    latf: LatfConfig = field(default_factory=LatfConfig)
    idts: IdtsConfig = field(default_factory=IdtsConfig)
    objective: DistillObjective = field(default_factory=DistillObjective)
    eval: DecodeConfig = field(default_factory=DecodeConfig)
    seeds: List[int] = field(default_factory=lambda: [10, 20, 30, 40, 50])

    def validate(self) -> None:
        _check(self.tokenizer == "byte", "tokenizer", "only the 'byte' tokenizer is available")
        for name in ("teacher", "student"):
            try:
                getattr(self, name).validate()
            except ValueError as exc:
                raise ConfigError(name, str(exc)) from None
        _check(self.teacher.vocab_size == self.student.vocab_size, "student.vocab_size",
               "teacher and student must share the vocabulary")
        for section in ("latf", "idts", "objective", "eval"):
            obj = getattr(self, section)
            try:
                obj.validate()
            except ValueError as exc:
                # section validators lead their messages with the offending field name
                first = str(exc).split(" ", 1)[0]
                names = {f.name for f in dataclasses.fields(obj)}
                raise ConfigError(f"{section}.{first}" if first in names else section, str(exc)) from None
        d = self.distill
        _check(d.steps > 0, "distill.steps", "must be positive")
        _check(d.steps > self.latf.resolve_warmup(d.steps), "distill.steps",
               "must exceed the warm-up length")
        _check(d.batch_size > 0, "distill.batch_size", "must be positive")
        _check(d.grad_accum >= 1, "distill.grad_accum", "must be at least 1")
        _check(d.controller in ("latf", "fixed", "linear", "cosine"), "distill.controller",
               f"unknown controller {d.controller!r}")
        _check(0.0 < d.ratio <= 1.0, "distill.ratio", "must lie in (0, 1]")
        _check(d.selection in ("batch", "sequence"), "distill.selection", "must be 'batch' or 'sequence'")
        _check(d.optimizer in ("adam", "sgd"), "distill.optimizer", "must be 'adam' or 'sgd'")
        _check(d.learning_rate >= 0, "distill.learning_rate", "must be non-negative")
        _check(d.sft_warmstart_steps >= 0, "distill.sft_warmstart_steps", "must be non-negative")
        _check(self.teacher_training.steps >= 0, "teacher_training.steps", "must be non-negative")
        _check(len(self.seeds) > 0, "seeds", "at least one seed is required")
        _check(0.0 <= self.data.validation_fraction < 1.0, "data.validation_fraction", "must lie in [0, 1)")

    def to_dict(self) -> dict:
        return to_plain(self)


def _check(cond: bool, field: str, message: str) -> None:
    if not cond:
        raise ConfigError(field, message)


def to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    return obj


def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    if origin is Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(args[0], value, path)
    if origin in (list, List):
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        (inner,) = typing.get_args(tp)
        return [_coerce(inner, v, f"{path}[{i}]") for i, v in enumerate(value)]
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected a mapping, got {value!r}")
        return from_dict(tp, value, path)
    if isinstance(tp, type) and issubclass(tp, enum.Enum):
        try:
            return tp(value)
        except ValueError:
            raise ConfigError(path, f"must be one of {[m.value for m in tp]}, got {value!r}") from None
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    return value


def from_dict(cls, data: dict, path: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"{path}.{key}" if path else key, "unknown key")
    kwargs = {k: _coerce(hints[k], v, f"{path}.{k}" if path else k) for k, v in data.items()}
    return cls(**kwargs)


def apply_override(data: dict, assignment: str) -> dict:
    """Apply ``a.b.c=value`` to a plain config dict; the value is parsed as YAML."""
    if "=" not in assignment:
        raise ConfigError(assignment, "override must look like key.path=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = data
    for i, part in enumerate(parts[:-1]):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(".".join(parts[: i + 1]), "unknown key")
        node = node[part]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(key, "unknown key")
    node[parts[-1]] = yaml.safe_load(raw) if raw.strip() else ""
    return data


def load_config(path: Optional[Union[str, Path]] = None, overrides=()) -> DistillRunConfig:
    """Defaults, then the file (JSON or YAML), then overrides in order; last wins."""
    base = DistillRunConfig().to_dict()
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
        except yaml.YAMLError as exc:
            raise ConfigError("config", f"cannot parse {path}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config", "top level must be a mapping")
        from_dict(DistillRunConfig, loaded)  # reject unknown keys early, with paths
        base = _deep_merge(base, loaded)
    for item in overrides:
        apply_override(base, item)
    cfg = from_dict(DistillRunConfig, base)
    cfg.validate()
    return cfg


def with_overrides(cfg: DistillRunConfig, overrides=()) -> DistillRunConfig:
    """A validated copy of ``cfg`` with ``key.path=value`` overrides applied."""
    data = cfg.to_dict()
    for item in overrides:
        apply_override(data, item)
    out = from_dict(DistillRunConfig, data)
    out.validate()
    return out


def _deep_merge(base: dict, new: dict) -> dict:
    out = dict(base)
    for k, v in new.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def save_config(cfg: DistillRunConfig, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2))
