"""Experiment configuration: INI or JSON files, versioned, with environment overrides.

INI values are parsed as Python literals where possible (``0.5``, ``True``,
``(0.01, 0.99)``, ``{3: 3.0}``) and kept as strings otherwise. Any key can be
overridden with ``SIDSEARCH_<SECTION>_<KEY>``; ``SIDSEARCH_OUT`` sets the
default run directory.
"""
from __future__ import annotations

import ast
import configparser
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .corpus import WorldConfig
from .distill import DistillConfig
from .reward import RewardConfig
from .rl import RLConfig

CONFIG_VERSION = 1
ENV_PREFIX = "SIDSEARCH_"


class ConfigError(ValueError):
    pass


@dataclass
class CodecConfig:
    L: int = 5
    K: int = 64
    iters: int = 25


@dataclass
class ModelSection:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    dropout: float = 0.1
    max_len: int = 64
    tied: bool = False


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 0.1
    momentum: float = 0.9
    clip_norm: float = 1.0
    stage1_steps: int = 400
    stage2_steps: int = 200
    stage3_steps: int = 200
    cot_mass: float = 0.25
    stage_focal: bool = True


@dataclass
class EvalConfig:
    n: int = 10
    beam: int = 32
    protocols: tuple = ("ladder", "headtail", "sides", "modes")
    modes: tuple = ("self", "ema", "joint", "special_token", "codi_l1")


@dataclass
class ExperimentConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    rl: RLConfig = field(default_factory=RLConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"version: unsupported config version {self.version}")
        checks = {"world": self.world.validate, "distill": self.distill.validate,
                  "reward": self.reward.validate, "rl": self.rl.validate}
        for name, fn in checks.items():
            try:
                fn()
            except ValueError as e:
                raise ConfigError(f"{name}: {e}") from e
        if self.model.d_model % self.model.n_heads:
            raise ConfigError("model.d_model: must be divisible by model.n_heads")
        if self.codec.K > self.world.n_items:
            raise ConfigError("codec.K: exceeds world.n_items")
        for p in self.eval.protocols:
            if p not in ("ladder", "headtail", "sides", "modes"):
                raise ConfigError(f"eval.protocols: unknown protocol {p!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["reward"]["tier_values"] = {str(k): v for k, v in self.reward.tier_values.items()}
        return d


SECTIONS = ("world", "codec", "model", "train", "distill", "reward", "rl", "eval")


def _coerce(path: str, value, target):
    """Cast ``value`` to the type of the dataclass default ``target``."""
    if isinstance(target, bool):
        if isinstance(value, str):
            if value.lower() in ("true", "yes", "1"):
                return True
            if value.lower() in ("false", "no", "0"):
                return False
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{path}: expected a boolean, got {value!r}")
    if isinstance(target, int) and not isinstance(target, bool):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(f"{path}: expected an integer, got {value!r}")
    if isinstance(target, float) or target is None:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if target is None and value is None:
            return None
        raise ConfigError(f"{path}: expected a number, got {value!r}")
    if isinstance(target, str):
        if isinstance(value, str):
            return value
        raise ConfigError(f"{path}: expected a string, got {value!r}")
    if isinstance(target, tuple):
        if isinstance(value, (list, tuple)):
            return tuple(value)
        raise ConfigError(f"{path}: expected a list, got {value!r}")
    if isinstance(target, dict):
        if isinstance(value, dict):
            return {int(k) if str(k).lstrip("-").isdigit() else k: v for k, v in value.items()}
        raise ConfigError(f"{path}: expected a mapping, got {value!r}")
    return value


def from_dict(raw: dict) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for key, value in raw.items():
        if key in ("version", "seed"):
            setattr(cfg, key, _coerce(key, value, getattr(cfg, key)))
            continue
        if key not in SECTIONS:
            raise ConfigError(f"{key}: unknown section")
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected a section")
        section = getattr(cfg, key)
        names = {f.name.lower(): f.name for f in fields(section)}
        for k, v in value.items():
            name = names.get(k.lower())
            if name is None:
                raise ConfigError(f"{key}.{k}: unknown field")
            setattr(section, name, _coerce(f"{key}.{name}", v, getattr(section, name)))
    return cfg


def _literal(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def load_config(path: str | Path | None = None, env: dict | None = None) -> ExperimentConfig:
    raw: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        text = path.read_text()
        if path.suffix == ".json":
            raw = json.loads(text)
        else:
            cp = configparser.ConfigParser(interpolation=None)
            cp.optionxform = str
            try:
                cp.read_string(text)
            except configparser.Error as e:
                raise ConfigError(f"{path}: {e}") from e
            for k, v in cp.defaults().items():
                raw[k] = _literal(v)
            for sec in cp.sections():
                raw[sec] = {k: _literal(v) for k, v in cp.items(sec) if k not in cp.defaults()}
    env = os.environ if env is None else env
    for key, value in sorted(env.items()):
        if not key.startswith(ENV_PREFIX) or key == ENV_PREFIX + "OUT":
            continue
        rest = key[len(ENV_PREFIX):].lower()
        if rest in ("seed", "version"):
            raw[rest] = _literal(value)
            continue
        sec, _, field_name = rest.partition("_")
        if sec in SECTIONS and field_name:
            raw.setdefault(sec, {})[field_name] = _literal(value)
    cfg = from_dict(raw)
    cfg.validate()
    return cfg


def write_config(cfg: ExperimentConfig, path: str | Path) -> None:
    """Snapshot as JSON (the resolved config re-produces the run)."""
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))


def to_ini(cfg: ExperimentConfig) -> str:
    d = cfg.to_dict()
    lines = ["[DEFAULT]", f"version = {d.pop('version')}", f"seed = {d.pop('seed')}", ""]
    for sec in SECTIONS:
        lines.append(f"[{sec}]")
        for k, v in d[sec].items():
            if isinstance(v, list):
                v = tuple(v)
            lines.append(f"{k} = {v!r}" if isinstance(v, str) else f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)
