"""Experiment configuration: YAML parsing, validation, hashing.

One config file fully determines a run. Unknown keys are rejected with
the offending path named, so typos cannot silently fall back to
defaults. The config hash is the SHA-256 of the canonical JSON form
(sorted keys, no whitespace) and is therefore stable under key
reordering in the source file.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import yaml

from .errors import ConfigError
from .losses import LossWeights

LAYOUTS = ("two_dataset", "three_dataset")


@dataclass(frozen=True)
class DataConfig:
    layout: str = "two_dataset"
    latent_dim: int = 8
    num_classes: int = 10
    samples_per_dataset: int = 2000
    test_samples: int = 500
    within_class_std: float = 0.5
    center_spread: float = 1.0
    shift_scale: float = 1.0           # latent shift norm, in units of within_class_std
    noise_std: float = 0.1
    modalities: tuple = ("m_a", "m_b", "m_c")
    raw_dims: tuple = (32, 24, 40)
    view_nonlinearity: str = "none"
    view_offset_scale: float = 0.1


@dataclass(frozen=True)
class EncoderConfig:
    hidden_dims: tuple = (64,)
    embed_dim: int = 16
    nonlinearity: str = "tanh"
    temperature_scales: dict = field(default_factory=dict)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    pretrain_epochs: int = 25
    stage1_epochs: int = 5
    batch_size: int = 16
    lr: float = 5e-4
    weight_decay: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    tau: float = 0.07
    pinv_rel_tol: float = 1e-12
    eval_every: int = 0                # 0: evaluate only after training
    weights: LossWeights = field(default_factory=LossWeights)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


_INT, _FLOAT, _STR = "int", "float", "str"


def _coerce(value, kind, path):
    if kind == _INT:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if kind == _FLOAT:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if kind == _STR:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise AssertionError(kind)


def _build(cls, mapping, path, casts):
    if not isinstance(mapping, dict):
        raise ConfigError(f"{path}: expected a mapping")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(mapping) - allowed
    if unknown:
        raise ConfigError(f"{path}: unknown key {sorted(unknown)[0]!r}")
    kwargs = {}
    for key, value in mapping.items():
        cast = casts.get(key)
        kwargs[key] = cast(value, f"{path}.{key}") if cast else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _int_tuple(value, path):
    if not isinstance(value, (list, tuple)):
        raise ConfigError(f"{path}: expected a list of integers")
    return tuple(_coerce(v, _INT, path) for v in value)


def _str_tuple(value, path):
    if not isinstance(value, (list, tuple)):
        raise ConfigError(f"{path}: expected a list of strings")
    return tuple(_coerce(v, _STR, path) for v in value)


def _scales_dict(value, path):
    if not isinstance(value, dict):
        raise ConfigError(f"{path}: expected a mapping of modality to scale")
    return {_coerce(k, _STR, path): _coerce(v, _FLOAT, f"{path}.{k}")
            for k, v in value.items()}


def _weights(value, path):
    return _build(LossWeights, value, path,
                  {k: lambda v, p: _coerce(v, _FLOAT, p)
                   for k in ("w_clip", "w_sym", "w_mox", "w_fro")})


_SCALAR_CASTS = {
    _INT: lambda v, p: _coerce(v, _INT, p),
    _FLOAT: lambda v, p: _coerce(v, _FLOAT, p),
    _STR: lambda v, p: _coerce(v, _STR, p),
}

_DATA_CASTS = {
    "layout": _SCALAR_CASTS[_STR],
    "latent_dim": _SCALAR_CASTS[_INT],
    "num_classes": _SCALAR_CASTS[_INT],
    "samples_per_dataset": _SCALAR_CASTS[_INT],
    "test_samples": _SCALAR_CASTS[_INT],
    "within_class_std": _SCALAR_CASTS[_FLOAT],
    "center_spread": _SCALAR_CASTS[_FLOAT],
    "shift_scale": _SCALAR_CASTS[_FLOAT],
    "noise_std": _SCALAR_CASTS[_FLOAT],
    "modalities": _str_tuple,
    "raw_dims": _int_tuple,
    "view_nonlinearity": _SCALAR_CASTS[_STR],
    "view_offset_scale": _SCALAR_CASTS[_FLOAT],
}

_ENCODER_CASTS = {
    "hidden_dims": _int_tuple,
    "embed_dim": _SCALAR_CASTS[_INT],
    "nonlinearity": _SCALAR_CASTS[_STR],
    "temperature_scales": _scales_dict,
}

_TRAIN_CASTS = {
    "epochs": _SCALAR_CASTS[_INT],
    "pretrain_epochs": _SCALAR_CASTS[_INT],
    "stage1_epochs": _SCALAR_CASTS[_INT],
    "batch_size": _SCALAR_CASTS[_INT],
    "lr": _SCALAR_CASTS[_FLOAT],
    "weight_decay": _SCALAR_CASTS[_FLOAT],
    "beta1": _SCALAR_CASTS[_FLOAT],
    "beta2": _SCALAR_CASTS[_FLOAT],
    "eps": _SCALAR_CASTS[_FLOAT],
    "tau": _SCALAR_CASTS[_FLOAT],
    "pinv_rel_tol": _SCALAR_CASTS[_FLOAT],
    "eval_every": _SCALAR_CASTS[_INT],
    "weights": _weights,
}


def config_from_dict(mapping: dict, path: str = "config") -> ExperimentConfig:
    if not isinstance(mapping, dict):
        raise ConfigError(f"{path}: expected a mapping at the top level")
    allowed = {"seed", "data", "encoder", "train"}
    unknown = set(mapping) - allowed
    if unknown:
        raise ConfigError(f"{path}: unknown key {sorted(unknown)[0]!r}")
    cfg = ExperimentConfig(
        seed=_coerce(mapping.get("seed", 0), _INT, f"{path}.seed"),
        data=_build(DataConfig, mapping.get("data", {}), f"{path}.data", _DATA_CASTS),
        encoder=_build(EncoderConfig, mapping.get("encoder", {}),
                       f"{path}.encoder", _ENCODER_CASTS),
        train=_build(TrainConfig, mapping.get("train", {}),
                     f"{path}.train", _TRAIN_CASTS),
    )
    validate_config(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if raw is None:
        raw = {}
    return config_from_dict(raw, path=str(path))


def validate_config(cfg: ExperimentConfig) -> None:
    d, e, t = cfg.data, cfg.encoder, cfg.train
    def bad(msg):
        raise ConfigError(msg)

    if d.layout not in LAYOUTS:
        bad(f"data.layout must be one of {LAYOUTS}, got {d.layout!r}")
    if d.latent_dim < 1 or d.num_classes < 2:
        bad("data: latent_dim >= 1 and num_classes >= 2 required")
    if len(d.modalities) != 3 or len(set(d.modalities)) != 3:
        bad("data.modalities must name exactly three distinct modalities")
    if len(d.raw_dims) != 3:
        bad("data.raw_dims must give one width per modality")
    if any(r < d.latent_dim for r in d.raw_dims):
        bad(f"data.raw_dims must each be >= latent_dim {d.latent_dim}")
    if d.samples_per_dataset < 1 or d.test_samples < 1:
        bad("data: sample counts must be positive")
    for name in ("within_class_std", "center_spread"):
        if not getattr(d, name) > 0:
            bad(f"data.{name} must be positive")
    if d.shift_scale < 0 or d.noise_std < 0 or d.view_offset_scale < 0:
        bad("data: shift_scale, noise_std, view_offset_scale must be >= 0")
    if d.view_nonlinearity not in ("none", "tanh"):
        bad(f"data.view_nonlinearity must be 'none' or 'tanh'")

    if e.embed_dim < 2:
        bad("encoder.embed_dim must be at least 2")
    if any(h < 1 for h in e.hidden_dims):
        bad("encoder.hidden_dims must be positive")
    if e.nonlinearity not in ("tanh", "relu"):
        bad(f"encoder.nonlinearity must be 'tanh' or 'relu'")
    for mod, scale in e.temperature_scales.items():
        if mod not in d.modalities:
            bad(f"encoder.temperature_scales names unknown modality {mod!r}")
        if not scale > 0:
            bad(f"encoder.temperature_scales[{mod!r}] must be positive")

    if t.epochs < 1:
        bad("train.epochs must be >= 1")
    if not 0 <= t.pretrain_epochs <= t.epochs:
        bad("train.pretrain_epochs must lie in [0, epochs]")
    if not 0 <= t.stage1_epochs <= t.epochs:
        bad("train.stage1_epochs must lie in [0, epochs]")
    divisor = 2 if d.layout == "two_dataset" else 6
    if t.batch_size % divisor != 0 or t.batch_size < divisor:
        bad(f"train.batch_size must be a positive multiple of {divisor} "
            f"for layout {d.layout!r}")
    for name in ("lr", "tau", "eps", "pinv_rel_tol"):
        if not getattr(t, name) > 0:
            bad(f"train.{name} must be positive")
    if t.weight_decay < 0 or t.eval_every < 0:
        bad("train: weight_decay and eval_every must be >= 0")
    for name in ("beta1", "beta2"):
        if not 0 <= getattr(t, name) < 1:
            bad(f"train.{name} must lie in [0, 1)")


def temperature_scale(cfg: ExperimentConfig, modality: str) -> float:
    return float(cfg.encoder.temperature_scales.get(modality, 1.0))


def config_to_dict(cfg: ExperimentConfig) -> dict:
    out = dataclasses.asdict(cfg)
    # tuples -> lists for clean JSON/YAML round-trips
    def clean(x):
        if isinstance(x, dict):
            return {k: clean(v) for k, v in x.items()}
        if isinstance(x, tuple):
            return [clean(v) for v in x]
        return x
    return clean(out)


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True,
                      separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=True)
