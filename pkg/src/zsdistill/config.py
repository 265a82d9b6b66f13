"""YAML run configuration.

One file describes a whole experiment: ``seed`` plus the sections ``data``,
``model``, ``train``, ``eval`` and ``paths``. Command-line flags override
file values, which override the defaults below.
"""

from __future__ import annotations

import copy
from pathlib import Path

import yaml

from .errors import ConfigError

DEFAULTS = {
    "seed": 0,
    "data": {
        "vocab_size": None,
        "image_dim": None,
        "text_dim": None,
        "train_size": None,
        "eval_size": 1000,
        "holdout_fraction": 0.0,
        "coupling": "shared",
        "noise": {
            "concepts_per_image": [1, 1],
            "caption_coverage": 1.0,
            "distractor_rate": 0.0,
            "feature_noise_sigma": 0.0,
        },
    },
    "model": {
        "hidden": [64],
        "embed_dim": 32,
        "tau": 0.07,
        "activation": "tanh",
        "learn_tau": False,
        "feature_dims": None,
    },
    "train": {
        "epochs": 10,
        "batch_size_per_worker": 128,
        "num_workers": 1,
        "alpha": 1.0,
        "distillation": True,
        "ema_decay": 0.999,
        "ema_cadence": "step",
        "kl_direction": "teacher_target",
        "lr": 3e-3,
        "momentum": 0.9,
        "weight_decay": 0.0,
        "eta_min": 0.0,
        "schedule_unit": "step",
        "log_steps": False,
    },
    "eval": {
        "ks": [1, 2, 5, 10],
        "split": "heldin",
        "use_teacher": False,
    },
    "paths": {
        "data_dir": "data",
        "run_dir": "run",
    },
}


def _merge(base: dict, override: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        name = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config field '{name}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config field '{name}' must be a mapping")
            out[key] = _merge(base[key], value, f"{name}.")
        else:
            out[key] = value
    return out


def load_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"{path}: YAML parse error{where}: {getattr(exc, 'problem', exc)}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return _merge(DEFAULTS, raw)


def default_config() -> dict:
    return copy.deepcopy(DEFAULTS)


def get(cfg: dict, dotted: str):
    node = cfg
    for part in dotted.split("."):
        node = node[part]
    return node


def require(cfg: dict, *fields: str) -> None:
    for name in fields:
        if get(cfg, name) is None:
            raise ConfigError(f"missing required config field '{name}'")


def set_value(cfg: dict, dotted: str, value) -> None:
    *parents, leaf = dotted.split(".")
    node = cfg
    for part in parents:
        node = node[part]
    node[leaf] = value
