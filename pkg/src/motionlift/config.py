"""Run configuration: JSON file -> validated dataclasses.

A config file is one JSON object::

    {
      "preset": "base",            # optional: base | large | tiny
      "seed": 0,
      "model":    {... NetworkConfig fields ...},
      "pretrain": {... PretrainConfig fields ...},
      "finetune": {... FinetuneConfig fields ...},
      "paths":    {"data": null, "out": null, "init": null, "topology": null}
    }

Every key is optional; unknown keys at any level are rejected.  The
environment variable MOTIONLIFT_SEED overrides ``seed``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields, asdict

from .errors import ConfigError
from .finetune import FinetuneConfig
from .network import NetworkConfig
from .pretrain import PretrainConfig

SEED_ENV = "MOTIONLIFT_SEED"

PRESETS = {
    "base": {},
    "large": {"dim": 256},
    "tiny": {"layers": 2, "dim": 16, "heads": 4, "mlp_ratio": 2, "frames": 16},
}
# presets that shrink the depth also need a feasible distillation depth
PRESET_PRETRAIN = {"tiny": {"target_layers": 2}}
PATH_KEYS = ("data", "out", "init", "topology")
TOP_KEYS = ("preset", "seed", "model", "pretrain", "finetune", "paths")


@dataclass
class RunConfig:
    model: NetworkConfig = field(default_factory=NetworkConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    seed: int = 0
    paths: dict = field(default_factory=lambda: {k: None for k in PATH_KEYS})
    preset: str = "base"

    def __post_init__(self):
        if self.pretrain.target_layers > self.model.layers:
            raise ConfigError(f"pretrain.target_layers={self.pretrain.target_layers} "
                              f"exceeds model.layers={self.model.layers}")

    def to_dict(self):
        return {"preset": self.preset, "seed": self.seed, "model": asdict(self.model),
                "pretrain": asdict(self.pretrain), "finetune": asdict(self.finetune),
                "paths": dict(self.paths)}


def _section(cls, values, name):
    if not isinstance(values, dict):
        raise ConfigError(f"'{name}' must be an object")
    known = {f.name for f in fields(cls) if f.init}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{name}': {', '.join(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"bad '{name}' section: {exc}") from exc


def parse_run_config(obj, env=None) -> RunConfig:
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(obj) - set(TOP_KEYS))
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    preset = obj.get("preset", "base")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    model_values = dict(PRESETS[preset])
    model_values.update(obj.get("model", {}) if isinstance(obj.get("model", {}), dict) else {})
    if "model" in obj and not isinstance(obj["model"], dict):
        raise ConfigError("'model' must be an object")
    pretrain_values = dict(PRESET_PRETRAIN.get(preset, {}))
    if isinstance(obj.get("pretrain", {}), dict):
        pretrain_values.update(obj.get("pretrain", {}))
    else:
        raise ConfigError("'pretrain' must be an object")
    paths = obj.get("paths", {})
    if not isinstance(paths, dict):
        raise ConfigError("'paths' must be an object")
    bad = sorted(set(paths) - set(PATH_KEYS))
    if bad:
        raise ConfigError(f"unknown key(s) in 'paths': {', '.join(bad)}")
    seed = obj.get("seed", 0)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            seed = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    return RunConfig(
        model=_section(NetworkConfig, model_values, "model"),
        pretrain=_section(PretrainConfig, pretrain_values, "pretrain"),
        finetune=_section(FinetuneConfig, obj.get("finetune", {}), "finetune"),
        seed=seed,
        paths={k: paths.get(k) for k in PATH_KEYS},
        preset=preset,
    )


def load_run_config(path=None, env=None) -> RunConfig:
    if path is None:
        return parse_run_config({}, env)
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc.msg} at line {exc.lineno}") from exc
    return parse_run_config(obj, env)
