"""Experiment configuration: TOML sections mapped onto frozen dataclasses.

Unknown keys are rejected so a typo fails loudly instead of silently
falling back to a default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import ConfigError

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib


@dataclass(frozen=True)
class DataConfig:
    path: str = ""
    format: str = "ml100k_udata"
    feedback: str = "explicit"


@dataclass(frozen=True)
class SplitConfig:
    test_fraction: float = 0.1
    method: str = "random"
    partition: str = "threshold"
    delta: int = 30
    inclusive: bool = False
    gamma: float = 0.7


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "nn"
    dim: int = 16
    hidden: int = 32
    gc_neighbor_cap: int = 50
    fixed_zero_offset: bool = False


@dataclass(frozen=True)
class PretrainConfig:
    users: str = "key"
    learning_rate: float = 1e-3
    batch_size: int = 256
    weight_decay: float = 0.0
    l2: float = 0.0
    max_epochs: int = 100
    patience: int = 5


@dataclass(frozen=True)
class AdaptConfig:
    mode: str = "interpolation"
    heads: int = 4
    sample_size: int = 200
    normalization: str = "softmax"
    score: str = "concat_bilinear"
    contrastive_weight: float = 10.0
    contrastive_sign: str = "nll"
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 5
    resample_keys: bool = False
    fallback_size: int = 10


@dataclass(frozen=True)
class EvalConfig:
    cohorts: tuple = ("all",)
    ndcg_k: int = 0
    negative_ratio: int = 5


@dataclass(frozen=True)
class Seeds:
    split: int = 0
    init: int = 0
    shuffle: int = 0


@dataclass(frozen=True)
class SynthConfig:
    users: int = 50
    items: int = 40
    rank: int = 8
    density: float = 0.3
    noise_sd: float = 0.0


@dataclass(frozen=True)
class TrainConfig:
    data: DataConfig = field(default_factory=DataConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seeds: Seeds = field(default_factory=Seeds)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def with_seed(self, seed: int) -> "TrainConfig":
        return dataclasses.replace(self, seeds=Seeds(seed, seed, seed))

    def replace(self, **sections) -> "TrainConfig":
        return dataclasses.replace(self, **sections)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def pretrain_hash(self) -> str:
        """Digest of every setting that determines the pretrained factors."""
        d = self.to_dict()
        part = {k: d[k] for k in ("data", "split", "model", "pretrain", "seeds")}
        blob = json.dumps(part, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


_CHOICES = {
    ("data", "format"): {"ml100k_udata", "generic_csv"},
    ("data", "feedback"): {"explicit", "implicit"},
    ("split", "method"): {"random", "head"},
    ("split", "partition"): {"threshold", "random"},
    ("model", "backbone"): {"dot", "nn", "gc"},
    ("pretrain", "users"): {"key", "all"},
    ("adapt", "mode"): {"interpolation", "extrapolation"},
    ("adapt", "normalization"): {"softmax", "linear_ratio"},
    ("adapt", "score"): {"concat", "concat_bilinear"},
    ("adapt", "contrastive_sign"): {"nll", "literal"},
}
_REQUIRED = {("data", "path")}


def _coerce(section: str, name: str, default: Any, value: Any) -> Any:
    key = f"{section}.{name}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise ConfigError(f"{key}: expected a list of strings")
        return tuple(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string")
    return value


def config_from_dict(raw: dict, require_data: bool = True) -> TrainConfig:
    sections = {f.name: f for f in fields(TrainConfig)}
    built = {}
    for name in raw:
        if name not in sections:
            raise ConfigError(f"{name}: unknown section")
    for name, sf in sections.items():
        cls = sf.default_factory()  # type: ignore[misc]
        given = raw.get(name, {})
        if not isinstance(given, dict):
            raise ConfigError(f"{name}: expected a table")
        known = {f.name: f for f in fields(cls)}
        values = {}
        for k, v in given.items():
            if k not in known:
                raise ConfigError(f"{name}.{k}: unknown key")
            values[k] = _coerce(name, k, getattr(cls, k), v)
            allowed = _CHOICES.get((name, k))
            if allowed and values[k] not in allowed:
                raise ConfigError(f"{name}.{k}: must be one of {sorted(allowed)}")
        for sec, k in _REQUIRED:
            if require_data and sec == name and k not in values:
                raise ConfigError(f"{sec}.{k}: missing required key")
        built[name] = dataclasses.replace(cls, **values)
    cfg = TrainConfig(**built)
    _validate(cfg)
    return cfg


def _validate(cfg: TrainConfig):
    checks = [
        ("split.test_fraction", 0 < cfg.split.test_fraction < 1),
        ("split.delta", cfg.split.delta >= 0),
        ("split.gamma", 0 < cfg.split.gamma < 1),
        ("model.dim", cfg.model.dim >= 1),
        ("model.hidden", cfg.model.hidden >= 1),
        ("model.gc_neighbor_cap", cfg.model.gc_neighbor_cap >= 1),
        ("pretrain.learning_rate", cfg.pretrain.learning_rate > 0),
        ("pretrain.batch_size", cfg.pretrain.batch_size >= 1),
        ("pretrain.weight_decay", cfg.pretrain.weight_decay >= 0),
        ("pretrain.l2", cfg.pretrain.l2 >= 0),
        ("pretrain.max_epochs", cfg.pretrain.max_epochs >= 0),
        ("pretrain.patience", cfg.pretrain.patience >= 1),
        ("adapt.heads", cfg.adapt.heads >= 1),
        ("adapt.sample_size", cfg.adapt.sample_size >= 1),
        ("adapt.contrastive_weight", cfg.adapt.contrastive_weight >= 0),
        ("adapt.learning_rate", cfg.adapt.learning_rate > 0),
        ("adapt.batch_size", cfg.adapt.batch_size >= 1),
        ("adapt.max_epochs", cfg.adapt.max_epochs >= 0),
        ("adapt.patience", cfg.adapt.patience >= 1),
        ("adapt.fallback_size", cfg.adapt.fallback_size >= 0),
        ("eval.ndcg_k", cfg.eval.ndcg_k >= 0),
        ("eval.negative_ratio", cfg.eval.negative_ratio >= 0),
    ]
    for key, ok in checks:
        if not ok:
            raise ConfigError(f"{key}: value out of range")
    for c in cfg.eval.cohorts:
        if c not in ("all", "few_shot", "new"):
            raise ConfigError(f"eval.cohorts: unknown cohort {c!r}")


def load_config(path) -> TrainConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path}: {exc}") from None
    cfg = config_from_dict(raw)
    if cfg.data.path and not Path(cfg.data.path).is_absolute():
        resolved = (path.parent / cfg.data.path)
        if resolved.exists() or not Path(cfg.data.path).exists():
            cfg = cfg.replace(data=dataclasses.replace(cfg.data, path=str(resolved)))
    return cfg
