"""Run configuration: nested JSON with flat dotted-key overrides."""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .bench import ExperimentConfig
from .neural.training import TrainConfig
from .sysmodel import SystemConfig


class ConfigError(ValueError):
    pass


DESK = {
    "system": {"K": 20, "Ns": 16, "L": 3, "n": 2, "snr_db": 10.0, "seed": 0},
    "data": {"train": 200000, "val": 10000, "test": 10000, "test_n_max": 3},
    "model": {"arch": "BRNN", "relu_layers": 2, "relu_width": None, "residual_blocks": 3,
              "head": "softmax", "dtype": "float32"},
    "train": {"learning_rate": 0.01, "momentum": 0.9, "batch_size": 250, "epochs": 10,
              "eval_every": 100, "val_subset": 2000, "seed": 0, "resume": False},
    "bench": {"kinds": ["detection", "mse", "timing"],
              "methods": ["OMP", "BOMP", "IHT", "BIHT", "DNN", "BRNN"],
              "sweep_axis": "n", "sweep_values": [1, 2, 3], "trials": 1000,
              "timing_samples": 1000, "warmup": 50, "timing_grid": [],
              "mse_normalized": True, "noiseless": False},
}

FULL = copy.deepcopy(DESK)
FULL["system"].update(K=100, Ns=40, L=6, n=6)
FULL["data"].update(train=8_000_000, val=100_000, test=100_000, test_n_max=6)
FULL["train"].update(epochs=1)
FULL["bench"].update(sweep_values=[1, 2, 3, 4, 5, 6],
                      timing_grid=[[30, 3], [30, 6], [40, 3], [40, 6], [50, 3], [50, 6]])

PRESETS = {"desk": DESK, "full": FULL}


def load(path=None, preset="desk") -> dict:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    cfg = copy.deepcopy(PRESETS[preset])
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        for section, values in user.items():
            if section not in cfg or not isinstance(values, dict):
                raise ConfigError(f"unknown config section {section!r}")
            for k, v in values.items():
                _set(cfg, f"{section}.{k}", v)
    validate(cfg)
    return cfg


def _resolve(cfg, key):
    if "." in key:
        section, leaf = key.split(".", 1)
        if section in cfg and leaf in cfg[section]:
            return section, leaf
        raise ConfigError(f"unknown config key {key!r}")
    hits = [s for s in cfg if key in cfg[s]]
    if len(hits) != 1:
        raise ConfigError(f"config key {key!r} is {'ambiguous' if hits else 'unknown'}")
    return hits[0], key


def _set(cfg, key, value):
    section, leaf = _resolve(cfg, key)
    cfg[section][leaf] = value


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply ``key=value`` strings; values parse as JSON, else stay strings."""
    cfg = copy.deepcopy(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        _set(cfg, key.strip(), value)
    validate(cfg)
    return cfg


def system_config(cfg) -> SystemConfig:
    return SystemConfig.from_dict(cfg["system"])


def train_config(cfg) -> TrainConfig:
    t = {k: v for k, v in cfg["train"].items() if k != "resume"}
    return TrainConfig(**t)


def experiment_config(cfg, out_dir=".") -> ExperimentConfig:
    b = cfg["bench"]
    methods = b["methods"]
    if isinstance(methods, str):
        methods = [m.strip() for m in methods.split(",") if m.strip()]
    return ExperimentConfig(
        system=system_config(cfg), methods=tuple(methods), sweep_axis=b["sweep_axis"],
        sweep_values=tuple(b["sweep_values"]), trials=int(b["trials"]), out_dir=str(out_dir),
        seed=int(cfg["system"]["seed"]), timing_samples=int(b["timing_samples"]),
        warmup=int(b["warmup"]), timing_grid=tuple(tuple(p) for p in b["timing_grid"]),
        mse_normalized=bool(b["mse_normalized"]), noiseless=bool(b["noiseless"]))


def validate(cfg) -> None:
    try:
        system_config(cfg)
        train_config(cfg)
        experiment_config(cfg)
    except (TypeError, ValueError, KeyError) as e:
        raise ConfigError(str(e)) from None
    d = cfg["data"]
    if min(d["train"], d["val"], d["test"]) < 1 or d["test_n_max"] < 1:
        raise ConfigError("data counts and test_n_max must be >= 1")
    if cfg["model"]["arch"] not in ("BRNN", "DNN"):
        raise ConfigError(f"unknown arch {cfg['model']['arch']!r}")
    bad = set(cfg["bench"]["kinds"]) - {"detection", "mse", "timing", "convergence"}
    if bad:
        raise ConfigError(f"unknown bench kinds {sorted(bad)}")


def dumps(cfg) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"
