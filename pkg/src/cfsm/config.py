"""Run configuration.

One JSON document with sections ``data``, ``stage1``, ``stage2`` and
``eval``.  Unknown keys are rejected so a typo cannot silently fall back to
a default.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    num_identities: int = 40
    samples_per_id: int = 10
    image_size: int = 32
    target_preset: str = "mixed"
    degradation: dict | None = None  # overrides the preset when given
    target_fraction: float = 1.0
    target_identities: int = 40  # size of the disjoint identity pool degraded into the target set
    seed: int = 0


@dataclass
class Stage1Config:
    source: str | None = None
    target: str | None = None
    steps: int = 3000
    batch_size: int = 32
    lr: float = 1e-4
    adam_betas: tuple[float, float] = (0.5, 0.99)
    lambda_adv: float = 1.0
    lambda_ort: float = 1.0
    lambda_id: float = 8.0
    l_a: float = 0.0
    u_a: float = 6.0
    l_m: float = 0.05
    u_m: float = 0.65
    q: int = 10
    d: int = 128
    image_size: int = 32
    gen_width: int = 64
    disc_width: int = 64
    embedding_dim: int = 128
    arcface_s: float = 16.0
    arcface_m: float = 0.3
    idnet_steps: int = 2000
    idnet_lr: float = 1e-3
    idnet_checkpoint: str | None = None
    checkpoint_every: int = 0
    seed: int = 0


@dataclass
class Stage2Config:
    labeled: str | None = None
    mode: str = "baseline"
    synthesis_checkpoint: str | None = None
    epsilon: float = 0.314
    synth_ratio: float = 0.5
    steps: int = 3000
    batch_size: int = 32
    lr: float = 1e-4
    adam_betas: tuple[float, float] = (0.5, 0.99)
    arcface_s: float = 16.0
    arcface_m: float = 0.3
    embedding_dim: int = 128
    record_perturbations: bool = False
    checkpoint_every: int = 0
    seed: int = 0


@dataclass
class EvalConfig:
    checkpoint: str | None = None
    manifest: str | None = None
    degradation: dict | None = None
    degrade_preset: str | None = None
    ks: tuple[int, ...] = (1, 5)
    fars: tuple[float, ...] = (1e-1, 1e-2)
    seed: int = 0


SECTIONS = {"data": DataConfig, "stage1": Stage1Config, "stage2": Stage2Config, "eval": EvalConfig}
MODES = ("baseline", "random_style", "guided")


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(cls, section: str, values: dict) -> Any:
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")
    kwargs = {}
    for k, v in values.items():
        if isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    return cls(**kwargs)


def parse_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    cfg = RunConfig(**{name: _coerce(cls, name, doc.get(name, {})) for name, cls in SECTIONS.items()})
    validate(cfg)
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON in {path}: {e}") from None
    return parse_config(doc)


def validate(cfg: RunConfig):
    s1, s2 = cfg.stage1, cfg.stage2
    if s1.steps < 1:
        raise ConfigError("stage1.steps must be >= 1")
    if s1.batch_size < 2:
        raise ConfigError("stage1.batch_size must be >= 2")
    if not 1 <= s1.q < s1.d:
        raise ConfigError("stage1 needs 1 <= q < d")
    if s2.mode not in MODES:
        raise ConfigError(f"stage2.mode must be one of {MODES}, got {s2.mode!r}")
    if not 0.0 <= s2.synth_ratio <= 1.0:
        raise ConfigError("stage2.synth_ratio must be in [0, 1]")
    if s2.mode == "guided" and s2.epsilon <= 0:
        raise ConfigError("stage2.epsilon must be > 0 in guided mode")


def require(section: Any, *keys: str):
    """Raise ConfigError naming the first missing (None) key."""
    name = {v: k for k, v in SECTIONS.items()}[type(section)]
    for k in keys:
        if getattr(section, k) is None:
            raise ConfigError(f"missing required key {name}.{k}")
