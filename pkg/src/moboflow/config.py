"""Run configuration: a nested key-value file (YAML) with strict validation.

Unknown keys are rejected, not ignored. CLI ``--override key.path=value``
entries take precedence over file values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import yaml

from .envs import Env, make_env
from .mobo import MoboConfig, SyntheticOracle, default_profiles
from .surrogate import SurrogateConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


_SCHEMA = {
    "env": {"kind", "dims", "side", "vocab", "max_items", "enumeration_cap"},
    "objectives": {"count", "profiles"},
    "model": {"conditioning", "trunk_width", "trunk_depth", "head_hidden",
              "hyper_width", "hyper_depth"},
    "train": {"steps", "online_batch", "offline_batch", "hindsight", "eps_uniform",
              "lr", "reward_exponent", "reward_norm", "min_reward", "alpha",
              "replay_capacity", "grad_clip"},
    "mobo": {"rounds", "batch", "init_size", "k_preferences", "alpha",
             "scalarization", "beta_ucb", "surrogate", "retrain", "reference_point"},
    "surrogate": {"hidden", "depth", "lr", "max_iters", "patience", "batch_size",
                  "dropout", "weight_decay", "val_fraction", "evid_reg",
                  "ensemble_size", "min_dataset", "grad_clip", "val_every"},
    "synthetic": {"eval_preferences", "samples_per_preference", "top_k"},
    "ablation": {"alpha_grid", "scalarizations"},
    "seeds": None,
    "out": None,
}


def _check_keys(cfg: dict) -> None:
    for key, val in cfg.items():
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config section {key!r}")
        allowed = _SCHEMA[key]
        if allowed is None:
            continue
        if not isinstance(val, dict):
            raise ConfigError(f"section {key!r} must be a mapping")
        for sub in val:
            if sub not in allowed:
                raise ConfigError(f"unknown key {key}.{sub}")


def _parse_value(text: str):
    return yaml.safe_load(text)


def apply_overrides(cfg: dict, overrides) -> dict:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key.path=value")
        path, value = item.split("=", 1)
        keys = path.split(".")
        node = cfg
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {path!r} crosses a non-mapping")
        node[keys[-1]] = _parse_value(value)
    return cfg


@dataclass
class RunConfig:
    env: Env
    oracle: SyntheticOracle
    model: dict
    train: TrainConfig
    mobo: MoboConfig
    surrogate: SurrogateConfig
    seeds: list
    out: str | None
    conditioning: str
    synthetic: dict = field(default_factory=dict)
    ablation: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)


def load_config(path=None, overrides=(), raw: dict | None = None) -> RunConfig:
    if raw is None:
        raw = yaml.safe_load(open(path)) or {}
    raw = apply_overrides(dict(raw), overrides)
    _check_keys(raw)

    env_cfg = dict(raw.get("env") or {"kind": "hypergrid", "dims": 2, "side": 16})
    kind = env_cfg.pop("kind", "hypergrid")
    env = make_env(kind, **env_cfg)

    obj = raw.get("objectives") or {}
    if obj.get("profiles") is not None:
        oracle = SyntheticOracle(obj["profiles"])
    else:
        oracle = SyntheticOracle(default_profiles(env, obj.get("count", 2)))
    m = oracle.n_objectives

    model = dict(raw.get("model") or {})
    conditioning = model.pop("conditioning", "hypernet")

    train_kwargs = dict(raw.get("train") or {})
    if "alpha" not in train_kwargs:
        train_kwargs["alpha"] = (1.0,) * m
    train_kwargs["alpha"] = tuple(train_kwargs["alpha"])
    train = TrainConfig(**train_kwargs)

    mobo_kwargs = dict(raw.get("mobo") or {})
    if "alpha" not in mobo_kwargs:
        mobo_kwargs["alpha"] = (1.0,) * m
    mobo_kwargs["alpha"] = tuple(mobo_kwargs["alpha"])
    if "k_preferences" not in mobo_kwargs:
        mobo_kwargs["k_preferences"] = 5 if m == 2 else 10
    if mobo_kwargs.get("reference_point") is not None:
        mobo_kwargs["reference_point"] = tuple(mobo_kwargs["reference_point"])
    mobo = MoboConfig(**mobo_kwargs)

    surr = SurrogateConfig(**(raw.get("surrogate") or {}))

    seeds = raw.get("seeds")
    if seeds is not None and len(seeds) == 0:
        raise ConfigError("seed list must be nonempty")
    seeds = list(seeds) if seeds is not None else [0]
    if len(train.alpha) != m or len(mobo.alpha) != m:
        raise ConfigError("alpha length must match the number of objectives")
    return RunConfig(env=env, oracle=oracle, model=model, train=train, mobo=mobo,
                     surrogate=surr, seeds=seeds, out=raw.get("out"),
                     conditioning=conditioning,
                     synthetic=dict(raw.get("synthetic") or {}),
                     ablation=dict(raw.get("ablation") or {}),
                     raw=raw)
