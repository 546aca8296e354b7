"""Run configuration (JSON) parsing and validation.

Example::

    {
      "model": {"preset": "deit-s"},
      "schedule": {"stages": [[4, 50], [7, 50], [10, 50]], "tau": 7e-5},
      "normalization": {"mean": [0.485, 0.456, 0.406],
                        "std": [0.229, 0.224, 0.225]},
      "seed": 0,
      "flags": {"observe": false, "viz": false, "policy_override": null}
    }

``model`` takes either a ``preset`` name (optionally with field overrides)
or every ModelConfig field. ``tau`` may be a number or the string ``"inf"``.
Unknown keys anywhere are rejected.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields, replace

from .compress import MODES, CompressionSchedule
from .engine import PRESETS, ModelConfig
from .exceptions import ConfigError, ScheduleError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=lambda: PRESETS["deit-s"])
    schedule: CompressionSchedule = field(default_factory=CompressionSchedule)
    mean: tuple = IMAGENET_MEAN
    std: tuple = IMAGENET_STD
    seed: int = 0
    observe: bool = False
    viz: bool = False
    policy_override: str = None

    @property
    def effective_schedule(self):
        if self.policy_override is None:
            return self.schedule
        return replace(self.schedule, mode=self.policy_override)

    def to_dict(self):
        s = self.schedule
        return {
            "model": self.model.to_dict(),
            "schedule": {
                "stages": [list(st) for st in s.stages],
                "tau": _number_out(s.tau),
                "mode": s.mode,
                "metric": s.metric,
                "tau_sim": _number_out(s.tau_sim),
                "scoring": s.scoring,
                "pooling": s.pooling,
                "merge_reduction": s.merge_reduction,
                "budget": s.budget,
                "random_seed": s.random_seed,
            },
            "normalization": {"mean": list(self.mean), "std": list(self.std)},
            "seed": self.seed,
            "flags": {
                "observe": self.observe,
                "viz": self.viz,
                "policy_override": self.policy_override,
            },
        }


def _number_out(x):
    return "inf" if math.isinf(x) and x > 0 else x


def _check_keys(obj, allowed, where):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be an object")
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")


def _number(value, where):
    if isinstance(value, str) and value.lower() in ("inf", "infinity", "+inf"):
        return math.inf
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where} must be a number, got {value!r}")
    return float(value)


def _int(value, where):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{where} must be an integer, got {value!r}")
    return value


def parse_model(obj):
    names = [f.name for f in fields(ModelConfig)]
    _check_keys(obj, names + ["preset"], "model")
    obj = dict(obj)
    preset = obj.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; have {sorted(PRESETS)}")
        return replace(PRESETS[preset], **obj)
    missing = [n for n in names if n not in obj and n != "mlp_ratio"]
    if missing:
        raise ConfigError(f"model is missing {missing}")
    return ModelConfig(**obj)


def parse_schedule(obj):
    allowed = [f.name for f in fields(CompressionSchedule)]
    _check_keys(obj, allowed, "schedule")
    obj = dict(obj)
    stages = []
    for st in obj.pop("stages", []):
        if isinstance(st, dict):
            _check_keys(st, ["layer", "r"], "schedule.stages[]")
            st = (st.get("layer"), st.get("r"))
        if not isinstance(st, (list, tuple)) or len(st) != 2:
            raise ConfigError(f"stage must be [layer, r] or {{layer, r}}, got {st!r}")
        stages.append((_int(st[0], "stage layer"), _int(st[1], "stage r")))
    for key in ("tau", "tau_sim"):
        if key in obj:
            obj[key] = _number(obj[key], f"schedule.{key}")
    if "random_seed" in obj:
        _int(obj["random_seed"], "schedule.random_seed")
    try:
        return CompressionSchedule(stages=tuple(stages), **obj)
    except ScheduleError as exc:
        raise ConfigError(str(exc)) from None


def parse_run_config(obj):
    _check_keys(obj, ["model", "schedule", "normalization", "seed", "flags"], "config")
    try:
        model = parse_model(obj.get("model", {"preset": "deit-s"}))
    except TypeError as exc:
        raise ConfigError(f"model: {exc}") from None
    schedule = parse_schedule(obj.get("schedule", {}))
    norm = obj.get("normalization", {})
    _check_keys(norm, ["mean", "std"], "normalization")
    mean = tuple(_number(v, "normalization.mean") for v in norm.get("mean", IMAGENET_MEAN))
    std = tuple(_number(v, "normalization.std") for v in norm.get("std", IMAGENET_STD))
    if len(mean) != model.channels or len(std) != model.channels:
        raise ConfigError(f"normalization needs {model.channels} values per field")
    if any(s <= 0 for s in std):
        raise ConfigError("normalization std must be positive")
    flags = obj.get("flags", {})
    _check_keys(flags, ["observe", "viz", "policy_override"], "flags")
    override = flags.get("policy_override")
    if override is not None and override not in MODES:
        raise ConfigError(f"policy_override must be one of {MODES}")
    for key in ("observe", "viz"):
        if not isinstance(flags.get(key, False), bool):
            raise ConfigError(f"flags.{key} must be a boolean")
    cfg = RunConfig(
        model=model,
        schedule=schedule,
        mean=mean,
        std=std,
        seed=_int(obj.get("seed", 0), "seed"),
        observe=flags.get("observe", False),
        viz=flags.get("viz", False),
        policy_override=override,
    )
    return cfg


def load_run_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot load {path}: {exc}") from None
    return parse_run_config(obj)
