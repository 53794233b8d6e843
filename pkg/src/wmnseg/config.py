"""YAML run configuration shared by the CLI subcommands.

All numeric hyperparameters live here; CLI flags only pick files, modes
and seeds. Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import yaml

from .engine import TrainConfig
from .experiment import phantom_segmentation_config, phantom_synthesis_config

DEFAULTS = {
    "seed": 0,
    "phantom": {"n_controls": 20, "n_patients": 20, "atrophy": {}, "spec": {}},
    "preprocess": {
        "p_low": 1.0,
        "p_high": 99.0,
        "tools": {"bias_correct": None, "brain_extract": None, "affine_register": None},
    },
    "split": {"train": 24, "val": 4, "test": 8},
    "synthesis": phantom_synthesis_config().to_dict(),
    "segmentation": phantom_segmentation_config().to_dict(),
    "scs_train_input": "synthesized",
    "infer": {"batch_size": 16, "stride": None},
    "stats": {"alpha": 0.05},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}.{k}" if path else k
        if k not in base:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(base[k], dict) and base[k] and isinstance(v, dict) \
                and k not in ("atrophy", "spec", "tools"):
            out[k] = _merge(base[k], v, where)
        elif k == "tools" and isinstance(v, dict):
            unknown = set(v) - set(base[k])
            if unknown:
                raise ConfigError(f"unknown preprocessing tool(s) {sorted(unknown)} in '{where}'")
            out[k] = {**base[k], **v}
        else:
            out[k] = v
    return out


def validate(cfg: dict) -> dict:
    try:
        for task in ("synthesis", "segmentation"):
            c = TrainConfig.from_dict(cfg[task])
            if c.task != task:
                raise ConfigError(f"'{task}.task' must be '{task}'")
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid training config: {exc}") from exc
    if cfg["scs_train_input"] not in ("synthesized", "true_wmn"):
        raise ConfigError("'scs_train_input' must be 'synthesized' or 'true_wmn'")
    split = cfg["split"]
    for k in ("train", "val", "test"):
        v = split[k]
        if not (isinstance(v, int) and v >= 0) and not isinstance(v, list):
            raise ConfigError(f"'split.{k}' must be a count or a list of subject ids")
    p = cfg["preprocess"]
    if not 0 <= p["p_low"] < p["p_high"] <= 100:
        raise ConfigError("need 0 <= preprocess.p_low < preprocess.p_high <= 100")
    ph = cfg["phantom"]
    if ph["n_controls"] < 2 or (ph["n_patients"] and ph["n_patients"] < 2):
        raise ConfigError("phantom cohorts need at least 2 subjects per group")
    return cfg


def load_config(path=None, seed: int | None = None) -> dict:
    """Defaults, overlaid with the YAML file at ``path``; ``seed`` overrides every seed."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            user = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = _merge(cfg, user)
    if seed is not None:
        cfg["seed"] = int(seed)
    for task in ("synthesis", "segmentation"):
        cfg[task]["seed"] = cfg["seed"]
    return validate(cfg)


def train_config(cfg: dict, task: str, **overrides) -> TrainConfig:
    return TrainConfig.from_dict({**cfg[task], **overrides})


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()


def dump(cfg: dict, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg, sort_keys=True))
