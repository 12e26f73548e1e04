"""Run configuration files (versioned YAML) and config hashing."""

from __future__ import annotations

import hashlib
import json
from dataclasses import fields
from pathlib import Path

import yaml

from .env import EpisodeConfig
from .model import default_model_path
from .ppo import PpoConfig
from .rewards import RewardConfig, preset as reward_preset

RUN_SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


def config_hash(doc: dict) -> str:
    return hashlib.sha256(
        json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()[:16]


def resolve_model_path(spec: str | None) -> Path:
    if spec in (None, "", "default"):
        return default_model_path()
    p = Path(spec)
    if not p.exists():
        raise ConfigError(f"model file not found: {p}")
    return p


def load_run_config(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"run config not found: {p}")
    try:
        doc = yaml.safe_load(p.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"run config does not parse: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError("run config must be a YAML mapping")
    if doc.get("run_schema", RUN_SCHEMA_VERSION) != RUN_SCHEMA_VERSION:
        raise ConfigError(f"unsupported run_schema {doc.get('run_schema')!r}")
    return doc


def _apply(cls, base, overrides: dict, ctx: str):
    valid = {f.name for f in fields(cls)}
    for k, v in (overrides or {}).items():
        if k not in valid:
            raise ConfigError(f"unknown key '{k}' in {ctx}")
        if isinstance(getattr(base, k, None), tuple) and isinstance(v, list):
            v = tuple(v)
        object.__setattr__(base, k, v) if getattr(cls, "__dataclass_params__").frozen \
            else setattr(base, k, v)
    return base


def make_reward_config(preset_name: str, overrides: dict | None = None) -> RewardConfig:
    cfg = reward_preset(preset_name)
    if overrides:
        from dataclasses import replace
        valid = {f.name for f in fields(RewardConfig)}
        for k in overrides:
            if k not in valid:
                raise ConfigError(f"unknown key '{k}' in reward_overrides")
        cfg = replace(cfg, **overrides)
    return cfg.validate()


def make_episode_config(overrides: dict | None = None) -> EpisodeConfig:
    return _apply(EpisodeConfig, EpisodeConfig(), overrides, "episode").validate()


def make_ppo_config(overrides: dict | None = None) -> PpoConfig:
    cfg = _apply(PpoConfig, PpoConfig(), overrides, "ppo")
    if isinstance(cfg.hidden, list):
        cfg.hidden = tuple(cfg.hidden)
    return cfg.validate()
