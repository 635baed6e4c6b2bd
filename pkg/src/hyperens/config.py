"""Run configuration: one flat mapping of dotted keys to typed values.

Files are JSON objects (nested sections or flat dotted keys both accepted).
Command-line overrides use ``key=value`` with a JSON value, falling back to
a bare string.
"""

from __future__ import annotations

import json
from dataclasses import fields
from pathlib import Path

from .models import ModelSpec
from .synthdata import DatasetConfig
from .trainer import TrainConfig

CONFIG_FORMAT_VERSION = 1

SECTIONS = {"dataset": DatasetConfig, "model": ModelSpec, "train": TrainConfig}
EXTRA_KEYS = {
    "seed": None,
    "predict.patch_size": 64,
    "predict.overlap": 0.8,
    "predict.alpha_grid": [round(0.1 * i, 1) for i in range(1, 10)],
    "predict.taus": [0.25, 0.5, 0.75],
    "evaluate.taus": [round(0.05 * i, 2) for i in range(21)],
    "evaluate.threshold": 0.5,
}


class ConfigError(ValueError):
    pass


def _defaults() -> dict:
    out = dict(EXTRA_KEYS)
    for section, cls in SECTIONS.items():
        inst = cls()
        for f in fields(cls):
            if f.name == "seed":
                continue
            val = getattr(inst, f.name)
            out[f"{section}.{f.name}"] = list(val) if isinstance(val, tuple) else val
    return out


def flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(path=None, overrides=()) -> dict:
    """Merge defaults, file, then overrides; reject unknown keys; require a seed."""
    cfg = _defaults()
    given = {}
    if path is not None:
        try:
            given.update(flatten(json.loads(Path(path).read_text())))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for item in overrides:
        k, v = parse_override(item)
        given[k] = v
    unknown = sorted(set(given) - set(cfg))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg.update(given)
    if cfg["seed"] is None:
        raise ConfigError("config must set 'seed'")
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")
    validate(cfg)
    return cfg


def section(cfg: dict, name: str) -> dict:
    pre = name + "."
    return {k[len(pre):]: v for k, v in cfg.items() if k.startswith(pre)}


def dataset_config(cfg: dict) -> DatasetConfig:
    return DatasetConfig.from_dict({**section(cfg, "dataset"), "seed": cfg["seed"]})


def model_spec(cfg: dict) -> ModelSpec:
    return ModelSpec.from_dict(section(cfg, "model"))


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict({**section(cfg, "train"), "seed": cfg["seed"]})


def validate(cfg: dict) -> None:
    try:
        dataset_config(cfg)
        model_spec(cfg)
        train_config(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    if not 0.0 <= float(cfg["predict.overlap"]) < 1.0:
        raise ConfigError("predict.overlap must lie in [0, 1)")
    if any(not 0.0 <= float(t) <= 1.0 for t in cfg["predict.taus"] + cfg["evaluate.taus"]):
        raise ConfigError("thresholds must lie in [0, 1]")


def echo(cfg: dict, out_dir) -> Path:
    """Write the effective config next to a command's outputs."""
    path = Path(out_dir) / "config.json"
    payload = {"format_version": CONFIG_FORMAT_VERSION, "config": dict(sorted(cfg.items()))}
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    return path
