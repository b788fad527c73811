"""Run configuration: one versioned YAML/JSON file, flags on top.

Precedence, lowest to highest: dataclass defaults, config file, command-line
flags. ``--seed`` overrides the global seed and every section seed.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .checkpoint import config_hash
from .errors import ConfigError
from .evaluation import EvalConfig
from .schema import DEFAULT_SCHEMA
from .synth import SynthSpec
from .transformer import MaskedTransformerConfig
from .vqvae import DecoupVqvaeConfig

CONFIG_VERSION = 1
OUTPUT_ROOT_ENV = "ATTRMOGEN_OUT"
RESOLVED_CONFIG = "resolved_config.json"


@dataclass
class DataConfig:
    n_per_cell: int = 16
    split_ratios: tuple = (0.8, 0.05, 0.15)
    vel_threshold: float = 3.0
    outlier_threshold: float = 6.0
    denoise_sigma: float = 0.0
    mirror: bool = False


@dataclass
class RunConfig:
    config_version: int = CONFIG_VERSION
    seed: int = 0
    out: str = ""
    schema: dict = field(default_factory=DEFAULT_SCHEMA.to_dict)
    synth: SynthSpec = field(default_factory=SynthSpec)
    data: DataConfig = field(default_factory=DataConfig)
    vqvae: DecoupVqvaeConfig = field(default_factory=DecoupVqvaeConfig)
    transformer: MaskedTransformerConfig = field(default_factory=MaskedTransformerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["synth"] = self.synth.to_dict()
        d.pop("out")  # outputs must not depend on where they are written
        return _jsonable(d)

    def hash(self) -> str:
        return config_hash(self.to_dict())


SECTIONS = {
    "synth": SynthSpec,
    "data": DataConfig,
    "vqvae": DecoupVqvaeConfig,
    "transformer": MaskedTransformerConfig,
    "eval": EvalConfig,
}


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def _build_section(cls, values: dict, name: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    if cls is SynthSpec:
        try:
            return SynthSpec.from_dict(values)
        except TypeError as e:
            raise ConfigError(f"section 'synth': {e}") from None
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in section {name!r}: {', '.join(unknown)}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    return cls(**kwargs)


def config_from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config root must be a mapping")
    version = d.get("config_version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"config_version {version} not supported (expected {CONFIG_VERSION})")
    top = {"config_version", "seed", "out", "schema", *SECTIONS}
    unknown = sorted(set(d) - top)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    cfg = RunConfig(seed=int(d.get("seed", 0)), out=str(d.get("out", "")))
    if "schema" in d:
        cfg.schema = d["schema"]
    for name, cls in SECTIONS.items():
        if name in d:
            setattr(cfg, name, _build_section(cls, d[name], name))
    return cfg


def load_config(path: str | os.PathLike | None) -> RunConfig:
    """Read a YAML or JSON config; ``None`` gives the defaults."""
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        d = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {p}: {e}") from None
    return config_from_dict(d)


def apply_overrides(cfg: RunConfig, *, seed=None, out=None, iterations=None, alpha=None, lam=None,
                    attr_in_text=None) -> RunConfig:
    """Flag values win over file values; ``None`` means "not given"."""
    if seed is not None:
        cfg.seed = seed
        cfg.synth = dataclasses.replace(cfg.synth, seed=seed)
        for name in ("vqvae", "transformer", "eval"):
            setattr(cfg, name, dataclasses.replace(getattr(cfg, name), seed=seed))
    if out is not None:
        cfg.out = out
    if iterations is not None:
        cfg.vqvae = dataclasses.replace(cfg.vqvae, iterations=iterations)
    if alpha is not None:
        cfg.vqvae = dataclasses.replace(cfg.vqvae, alpha=alpha)
    if lam is not None:
        cfg.vqvae = dataclasses.replace(cfg.vqvae, lam=lam)
    if attr_in_text is not None:
        cfg.transformer = dataclasses.replace(cfg.transformer, attr_in_text=attr_in_text)
    return cfg


def output_dir(cfg: RunConfig) -> Path:
    """``cfg.out`` if set, else ``$ATTRMOGEN_OUT``, else ``./runs``."""
    return Path(cfg.out or os.environ.get(OUTPUT_ROOT_ENV) or "runs")


def write_resolved(cfg: RunConfig, directory: str | os.PathLike) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    payload = {"config_hash": cfg.hash(), "config": cfg.to_dict()}
    path = d / RESOLVED_CONFIG
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path
