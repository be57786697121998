"""Run configuration: profiles, flat-key JSON config files and overrides.

Keys are ``<section>.<field>`` with sections env, data, model, train, eval,
for example ``{"profile": "ci", "train.epochs": 5, "model.d_model": 64}``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .datagen import DEFAULT_GAMMA, TIER_DEFAULTS, Tier, TierSpec
from .envsim import EnvConfig
from .evalharness import EvalConfig
from .model import ModelConfig
from .trainer import TrainConfig

PROFILES = {
    "full": {},
    "ci": {
        "model.d_model": 32,
        "model.n_layers": 2,
        "data.n_trajectories": 50,
        "train.epochs": 3,
        "eval.episodes_per_target": 5,
    },
}


@dataclass(frozen=True)
class DataConfig:
    seed: int = 42
    gamma: float = DEFAULT_GAMMA
    n_trajectories: int | None = None   # None: per-tier default (500 / 300 / 300)

    def tier_spec(self, tier) -> TierSpec:
        tier = Tier(tier)
        n, sigma = TIER_DEFAULTS[tier]
        return TierSpec(tier, self.n_trajectories or n, sigma)


@dataclass(frozen=True)
class RunConfig:
    profile: str = "full"
    env: EnvConfig = field(default_factory=EnvConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def snapshot(self) -> dict:
        """Fully resolved flat-key view (what gets persisted)."""
        out = {"profile": self.profile}
        for section in ("env", "data", "model", "train", "eval"):
            obj = getattr(self, section)
            for f in fields(obj):
                if section == "env" and f.name == "action_coupling":
                    continue
                v = getattr(obj, f.name)
                if section == "model" and f.name == "variant":
                    v = v.key
                if isinstance(v, tuple):
                    v = list(v)
                out[f"{section}.{f.name}"] = v
        return out


class ConfigError(ValueError):
    pass


def _coerce(section_obj, name: str, value):
    ftypes = {f.name: f for f in fields(section_obj)}
    if name not in ftypes:
        raise ConfigError(f"unknown config key {name!r} for {type(section_obj).__name__}")
    current = getattr(section_obj, name)
    if isinstance(value, str):
        if isinstance(current, bool):
            return value.lower() in ("1", "true", "yes", "on")
        if isinstance(current, (tuple, list)):
            return tuple(float(x) for x in value.split(","))
        if isinstance(current, int) and not isinstance(current, bool):
            return int(value)
        if isinstance(current, float):
            return float(value)
        if current is None:
            try:
                return int(value)
            except ValueError:
                try:
                    return float(value)
                except ValueError:
                    return None if value.lower() == "none" else value
    if isinstance(current, tuple) and isinstance(value, list):
        return tuple(value)
    return value


def resolve(file_values: dict | None = None, overrides: dict | None = None,
            profile: str | None = None) -> RunConfig:
    """Profile defaults, then config-file values, then command-line overrides."""
    merged: dict = {}
    file_values = dict(file_values or {})
    overrides = dict(overrides or {})
    prof = profile or overrides.pop("profile", None) or file_values.pop("profile", None) or "full"
    file_values.pop("profile", None)
    overrides.pop("profile", None)
    if prof not in PROFILES:
        raise ConfigError(f"unknown profile {prof!r}; expected one of {', '.join(PROFILES)}")
    merged.update(PROFILES[prof])
    merged.update(file_values)
    merged.update({k: v for k, v in overrides.items() if v is not None})

    sections = {"env": EnvConfig(), "data": DataConfig(), "model": ModelConfig(),
                "train": TrainConfig(), "eval": EvalConfig()}
    pending: dict = {s: {} for s in sections}
    for key, value in merged.items():
        if "." not in key:
            raise ConfigError(f"config key {key!r} must look like <section>.<field>")
        sec, name = key.split(".", 1)
        if sec not in sections:
            raise ConfigError(f"unknown config section {sec!r} in key {key!r}")
        pending[sec][name] = _coerce(sections[sec], name, value)
    built = {}
    for sec, obj in sections.items():
        kw = pending[sec]
        if sec == "model" and "d_model" in kw and "d_ff" not in kw:
            kw["d_ff"] = None  # re-derive 4 * d_model
        if sec == "env" and "reward_clip" in kw:
            kw["reward_clip"] = tuple(kw["reward_clip"])
        try:
            built[sec] = replace(obj, **kw) if kw else obj
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid {sec} config: {e}") from None
    # evaluation context follows the model
    built["eval"] = replace(built["eval"], context_len=built["model"].context_len)
    return RunConfig(profile=prof, **built)


def load_file(path) -> dict:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno}, column {e.colno}: {e.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object of flat keys")
    return data


def parse_assignments(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


__all__ = ["PROFILES", "DataConfig", "RunConfig", "ConfigError", "resolve", "load_file",
           "parse_assignments"]
