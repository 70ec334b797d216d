#!/usr/bin/env python3
"""
config.py — Experiment configuration: schema, loading, validation, hashing.

A config is one JSON file. Every section is optional and falls back to the
Income defaults (batch 32, lr 0.05, 10 epochs, 2 parties, embedding dim 10,
3-layer top model, r = 8, E_a = 2, target label 1):

    {
      "schema_version": 1,
      "name": "income-hassle",
      "dataset":   {"kind": "income", "path": "data/adult.csv"},
      "partition": {"parties": 2, "adversary_index": 1},
      "model":     {"embedding_dim": 10, "top_layers": 3},
      "training":  {"batch_size": 32, "lr": 0.05, "epochs": 10},
      "attack":    {"mode": "hassle", "target_label": 1, "attack_epoch": 2, "ratio": 8},
      "ssl":       {"corruption_rate": 0.6, "temperature": 0.07},
      "defenses":  [{"kind": "dpsgd", "params": {"sigma_g": 0.002}}],
      "seeds":     [0, 1, 2]
    }

Unknown keys are rejected with their dotted path. The config hash is the
SHA-256 of the canonical JSON of the resolved config (defaults filled in).
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from defenses import KINDS as DEFENSE_KINDS, resolve_params
from errors import ConfigurationError
from scarf import SSLConfig

SCHEMA_VERSION = 1


@dataclass
class DatasetConfig:
    kind: str = "income"
    path: Optional[str] = None
    n: int = 2000
    classes: int = 10
    dim: int = 20
    cluster_std: float = 1.0
    separation: float = 4.0
    test_fraction: float = 0.2
    seed: int = 0


@dataclass
class PartitionConfig:
    parties: int = 2
    adversary_index: int = 1
    ratios: Optional[List[float]] = None
    feature_ratio: Optional[float] = None
    proportional_embeddings: bool = False


@dataclass
class ModelConfig:
    embedding_dim: int = 10
    top_layers: int = 3
    top_hidden: int = 64
    bottom_layers: int = 2
    bottom_hidden: int = 64


@dataclass
class TrainingConfig:
    batch_size: int = 32
    lr: float = 0.05
    epochs: int = 10


@dataclass
class AttackConfig:
    mode: str = "hassle"
    target_label: int = 1
    known_id: Optional[int] = None
    attack_epoch: int = 2
    ratio: float = 8.0
    lia_mode: str = "hassle"


@dataclass
class DefenseSpec:
    kind: str
    params: Dict[str, Any] = field(default_factory=dict)


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    name: str = "experiment"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    ssl: SSLConfig = field(default_factory=SSLConfig)
    defenses: List[DefenseSpec] = field(default_factory=list)
    seeds: List[int] = field(default_factory=lambda: [0])
    baseline: bool = True
    saliency_samples: int = 1000
    event_log: bool = False


SECTIONS = {
    "dataset": DatasetConfig,
    "partition": PartitionConfig,
    "model": ModelConfig,
    "training": TrainingConfig,
    "attack": AttackConfig,
    "ssl": SSLConfig,
}

# sweep axis -> (section, key); defense axes map to (defense kind, param)
SWEEP_AXES = {
    "r": ("attack", "ratio"),
    "top_layers": ("model", "top_layers"),
    "embedding_dim": ("model", "embedding_dim"),
    "epochs": ("training", "epochs"),
    "feature_ratio": ("partition", "feature_ratio"),
    "K": ("partition", "parties"),
    "sigma_g": ("dpsgd", "sigma_g"),
    "σ_g": ("dpsgd", "sigma_g"),
    "lambda": ("gc", "lambda"),
    "λ": ("gc", "lambda"),
    "E_abl": ("abl", "e_abl"),
    "e_abl": ("abl", "e_abl"),
    "N_p": ("anp", "n_p"),
    "n_p": ("anp", "n_p"),
    "z": ("ep", "z"),
}


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def _coerce(value: Any, default: Any, path: str) -> Any:
    """Check `value` against the type of the field's default."""
    if default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigurationError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigurationError(f"{path}: expected a list, got {value!r}")
        return value
    return value


def _section(cls, raw: Any, path: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: expected an object")
    base = asdict(cls())
    kwargs = {}
    for key, value in raw.items():
        if key not in base:
            raise ConfigurationError(f"{path}.{key}: unknown key")
        kwargs[key] = _coerce(value, base[key], f"{path}.{key}")
    try:
        return cls(**kwargs)
    except ConfigurationError as e:
        raise ConfigurationError(f"{path}: {e}") from e


def _defense(raw: Any, path: str) -> DefenseSpec:
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: expected an object")
    for key in raw:
        if key not in ("kind", "params"):
            raise ConfigurationError(f"{path}.{key}: unknown key")
    kind = raw.get("kind")
    if kind not in DEFENSE_KINDS:
        raise ConfigurationError(f"{path}.kind: unknown defense {kind!r} (expected one of {DEFENSE_KINDS})")
    params = raw.get("params") or {}
    if not isinstance(params, dict):
        raise ConfigurationError(f"{path}.params: expected an object")
    try:
        resolved = resolve_params(kind, params)
    except ConfigurationError as e:
        raise ConfigurationError(f"{path}.params: {e}") from e
    return DefenseSpec(kind, resolved)


def config_from_dict(raw: Dict[str, Any]) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigurationError("config root must be an object")
    top_level = {f.name for f in fields(ExperimentConfig)}
    for key in raw:
        if key not in top_level:
            raise ConfigurationError(f"{key}: unknown key")
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigurationError(f"schema_version: unsupported version {version!r}")
    kwargs: Dict[str, Any] = {"schema_version": version}
    for name, cls in SECTIONS.items():
        kwargs[name] = _section(cls, raw.get(name), name)
    defenses = raw.get("defenses", [])
    if not isinstance(defenses, list):
        raise ConfigurationError("defenses: expected a list")
    kwargs["defenses"] = [_defense(d, f"defenses[{i}]") for i, d in enumerate(defenses)]
    base = ExperimentConfig()
    for key in ("name", "seeds", "baseline", "saliency_samples", "event_log"):
        if key in raw:
            kwargs[key] = _coerce(raw[key], getattr(base, key), key)
    config = ExperimentConfig(**kwargs)
    validate(config)
    return config


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as e:
        raise ConfigurationError(f"{path}: config file not found") from e
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
    try:
        return config_from_dict(raw)
    except ConfigurationError as e:
        raise ConfigurationError(f"{path}: {e}") from e


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def _require(ok: bool, message: str) -> None:
    if not ok:
        raise ConfigurationError(message)


def validate(config: ExperimentConfig) -> None:
    ds, p, m, t, a = config.dataset, config.partition, config.model, config.training, config.attack
    _require(ds.kind in ("income", "synth"), f"dataset.kind: expected income|synth, got {ds.kind!r}")
    if ds.kind == "synth":
        _require(ds.classes >= 2, "dataset.classes: must be >= 2")
        _require(ds.n >= ds.classes, "dataset.n: must be >= dataset.classes")
        _require(ds.dim >= 2, "dataset.dim: must be >= 2")
        _require(ds.cluster_std >= 0, "dataset.cluster_std: must be >= 0")
        _require(0 < ds.test_fraction < 1, "dataset.test_fraction: must be in (0,1)")
    _require(p.parties >= 2, "partition.parties: must be >= 2")
    _require(1 <= p.adversary_index < p.parties,
             f"partition.adversary_index: must be a passive party in [1, {p.parties})")
    if p.ratios is not None:
        _require(len(p.ratios) == p.parties, "partition.ratios: one ratio per party")
        _require(abs(sum(p.ratios) - 1.0) <= 1e-9, "partition.ratios: must sum to 1")
        _require(p.feature_ratio is None, "partition: ratios and feature_ratio are exclusive")
    if p.feature_ratio is not None:
        _require(0 < p.feature_ratio < 1, "partition.feature_ratio: must be in (0,1)")
    _require(m.embedding_dim >= 1, "model.embedding_dim: must be >= 1")
    _require(1 <= m.top_layers <= 5, "model.top_layers: must be in [1,5]")
    _require(m.top_hidden >= 1 and m.bottom_hidden >= 1, "model: hidden widths must be >= 1")
    _require(m.bottom_layers >= 1, "model.bottom_layers: must be >= 1")
    _require(t.batch_size >= 1, "training.batch_size: must be >= 1")
    _require(t.lr > 0, "training.lr: must be > 0")
    _require(t.epochs >= 1, "training.epochs: must be >= 1")
    _require(a.mode in ("hassle", "grad", "replace", "none"),
             f"attack.mode: expected hassle|grad|replace|none, got {a.mode!r}")
    _require(a.lia_mode in ("hassle", "ds"), f"attack.lia_mode: expected hassle|ds, got {a.lia_mode!r}")
    _require(a.target_label >= 0, "attack.target_label: must be >= 0")
    _require(2 <= a.attack_epoch <= t.epochs,
             f"attack.attack_epoch: must be in [2, {t.epochs}], got {a.attack_epoch}")
    _require(a.ratio >= 1, "attack.ratio: must be >= 1")
    _require(len(config.seeds) >= 1, "seeds: at least one seed")
    _require(all(isinstance(s, int) and not isinstance(s, bool) for s in config.seeds),
             "seeds: integers only")
    _require(len(set(config.seeds)) == len(config.seeds), "seeds: duplicates")
    _require(config.saliency_samples >= 1, "saliency_samples: must be >= 1")
    for i, d in enumerate(config.defenses):
        if d.kind == "abl":
            _require(1 <= d.params["e_abl"] < t.epochs,
                     f"defenses[{i}].params.e_abl: must be in [1, {t.epochs})")


# ---------------------------------------------------------------------------
# Serialisation, hashing, overrides
# ---------------------------------------------------------------------------

def to_dict(config: ExperimentConfig) -> Dict[str, Any]:
    return asdict(config)


def canonical_json(config: ExperimentConfig) -> str:
    return json.dumps(to_dict(config), sort_keys=True, separators=(",", ":"))


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def with_override(config: ExperimentConfig, axis: str, value: Any) -> ExperimentConfig:
    """Copy of `config` with one sweep axis set; defense axes add the defense if absent."""
    if axis not in SWEEP_AXES:
        raise ConfigurationError(
            f"{axis!r} is not sweepable (expected one of {sorted(set(SWEEP_AXES))})")
    section, key = SWEEP_AXES[axis]
    raw = to_dict(config)
    if section in SECTIONS:
        raw[section][key] = value
        if axis == "K" and raw["partition"].get("ratios") is not None:
            raw["partition"]["ratios"] = None
    else:
        specs = [d for d in raw["defenses"] if d["kind"] == section]
        if specs:
            specs[0]["params"][key] = value
        else:
            raw["defenses"].append({"kind": section, "params": {key: value}})
    raw["name"] = f"{config.name}[{axis}={value}]"
    return config_from_dict(copy.deepcopy(raw))


def parse_axis_value(axis: str, text: str) -> Any:
    """CLI value for an axis: ints for integer axes, floats otherwise."""
    if axis in ("top_layers", "embedding_dim", "epochs", "K", "E_abl", "e_abl", "N_p", "n_p"):
        try:
            return int(text)
        except ValueError as e:
            raise ConfigurationError(f"{axis}: expected an integer, got {text!r}") from e
    try:
        return float(text)
    except ValueError as e:
        raise ConfigurationError(f"{axis}: expected a number, got {text!r}") from e
