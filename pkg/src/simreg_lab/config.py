"""Flat ``key = value`` configuration with dotted namespaces.

Every key has a default, so an empty file is a valid config::

    model.embed_dim = 64
    simreg.tau = 0.01
    simreg.lambda = auto        # 10 * sqrt(d / 1024)
    optim.peak_lr = 3e-4
    data.source = zipf
    train.seed = 0
"""

from __future__ import annotations

import dataclasses
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .losses import SimRegConfig
from .model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class OptimConfig:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    peak_lr: float = 3e-4
    final_lr_fraction: float = 0.1
    warmup_steps: int = 200
    total_steps: int = 2000
    clip_norm: float = 1.0
    # recorded for provenance only; clipping is plain global-norm
    adagc_lambda: float = 1.04
    adagc_beta: float = 0.99

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("betas must lie in (0, 1)")
        if self.peak_lr <= 0:
            raise ConfigError("peak_lr must be positive")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError("need 0 <= warmup_steps <= total_steps")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")


@dataclass
class DataConfig:
    source: str = "zipf"
    path: str = ""
    mode: str = "byte"
    vocab_path: str = ""
    zipf_vocab: int = 256
    zipf_exponent: float = 1.1
    length: int = 400_000
    corpus_seed: int = 1234
    batch_size: int = 8
    seq_len: int = 64
    holdout: float = 0.05


@dataclass
class RunConfig:
    seed: int = 0
    log_interval: int = 50
    checkpoint_interval: int = 0
    eval_batches: int = 8


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    simreg: SimRegConfig = field(default_factory=lambda: SimRegConfig(tau=0.01, lam=0.0))
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: RunConfig = field(default_factory=RunConfig)


# config key -> dataclass field name, where they differ
_ALIASES = {"simreg.lambda": "lam"}
_SECTIONS = ("model", "simreg", "optim", "data", "train")


def _field_name(section: str, key: str) -> str:
    return _ALIASES.get(f"{section}.{key}", key)


def _key_name(section: str, fname: str) -> str:
    for full, target in _ALIASES.items():
        if full.startswith(section + ".") and target == fname:
            return full.split(".", 1)[1]
    return fname


def _coerce(raw: str, typ, key: str):
    raw = raw.strip()
    hints = typing.get_args(typ) if typing.get_origin(typ) is typing.Union else ()
    if hints and type(None) in hints:
        if raw.lower() in ("none", ""):
            return None
        typ = next(h for h in hints if h is not type(None))
    try:
        if typ is bool:
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if typ is int:
            return int(float(raw)) if "e" in raw.lower() else int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from exc


def parse_lines(lines) -> dict[str, str]:
    out = {}
    for num, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {num}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def apply_overrides(cfg: TrainConfig, pairs: dict[str, str]) -> TrainConfig:
    """Return a new config with dotted ``key -> raw value`` pairs applied."""
    sections = {name: dataclasses.asdict(getattr(cfg, name)) for name in _SECTIONS}
    auto_lambda = False
    for key, raw in pairs.items():
        section, _, sub = key.partition(".")
        if section not in sections or not sub:
            raise ConfigError(f"unknown config key {key!r}")
        fname = _field_name(section, sub)
        if fname not in sections[section]:
            raise ConfigError(f"unknown config key {key!r}")
        if key == "simreg.lambda" and raw.strip().lower() == "auto":
            auto_lambda = True
            continue
        hints = typing.get_type_hints(type(getattr(cfg, section)))
        sections[section][fname] = _coerce(raw, hints[fname], key)
    try:
        model = ModelConfig(**sections["model"])
        if auto_lambda:
            from .trainer import lambda_for_dim

            sections["simreg"]["lam"] = lambda_for_dim(model.embed_dim)
        return TrainConfig(
            model=model,
            simreg=SimRegConfig(**sections["simreg"]),
            optim=OptimConfig(**sections["optim"]),
            data=DataConfig(**sections["data"]),
            train=RunConfig(**sections["train"]),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path=None, overrides: dict[str, str] | None = None) -> TrainConfig:
    pairs = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {path} does not exist")
        pairs.update(parse_lines(p.read_text().splitlines()))
    pairs.update(overrides or {})
    return apply_overrides(TrainConfig(), pairs)


def flatten(cfg: TrainConfig) -> dict[str, str]:
    out = {}
    for section in _SECTIONS:
        for fname, value in dataclasses.asdict(getattr(cfg, section)).items():
            if isinstance(value, float) and math.isfinite(value):
                value = repr(value)
            out[f"{section}.{_key_name(section, fname)}"] = str(value)
    return out


def dumps(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in flatten(cfg).items())
