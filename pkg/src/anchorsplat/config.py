"""Run configuration: one JSON file, overridable by dot-joined keys."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from .anchor import DEFAULT_CLASSES, ClassTable
from .losses import LossWeights
from .optim import DEFAULT_LEARNING_RATES, FitSchedule

__all__ = ["RunConfig", "ConfigError", "default_config_dict", "apply_overrides", "parse_value"]


class ConfigError(ValueError):
    pass


def default_config_dict() -> dict:
    return {
        "paths": {"mesh": None, "skinning": None, "views": None, "output": "run"},
        "classes": DEFAULT_CLASSES.to_dict(),
        "weights": LossWeights().to_dict(),
        "stage1": {"iterations": 1500, "smooth_loss_start": None, "views_per_step": 1, "replan_every": 40,
                   "checkpoint_every": 0, "final_lr_fraction": 0.1, "learning_rates": dict(DEFAULT_LEARNING_RATES)},
        "stage3": {"iterations": 500, "views_per_step": 1, "replan_every": 40, "checkpoint_every": 0, "final_lr_fraction": 0.1,
                   "learning_rates": dict(DEFAULT_LEARNING_RATES)},
        "joint": {"iterations": 500, "views_per_step": 1, "replan_every": 40, "checkpoint_every": 0, "final_lr_fraction": 0.1,
                  "learning_rates": dict(DEFAULT_LEARNING_RATES)},
        "area_fraction": 0.02,
        "area_threshold": None,
        "duplication": 4,
        "init_offset": 1e-4,
        "dilation": 1,
        "skin_color": [0.8, 0.6, 0.5],
        "seed": 0,
        "metrics": {"penetration_mode": "nearest", "smoothing_iterations": 3},
    }


def parse_value(text: str):
    """JSON literal when it parses (numbers, true/false/null, lists), else the raw string."""
    try:
        return json.loads(text)
    except (json.JSONDecodeError, TypeError):
        return text


def _merge(base: dict, extra: dict, prefix="") -> dict:
    for k, v in extra.items():
        if k not in base:
            raise ConfigError(f"unknown config key {prefix + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict) and k not in ("classes",):
            _merge(base[k], v, prefix + k + ".")
        else:
            base[k] = v
    return base


def apply_overrides(doc: dict, overrides: Iterable) -> dict:
    """Set ``a.b.c=value`` pairs (key, value) on a nested dict; unknown keys are errors."""
    out = copy.deepcopy(doc)
    for key, value in overrides:
        parts = key.split(".")
        node = out
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config key {key!r}")
            node = node[p]
        if parts[-1] not in node and not (parts[-2:-1] == ["learning_rates"]):
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = parse_value(value) if isinstance(value, str) else value
    return out


@dataclass
class RunConfig:
    doc: dict = field(default_factory=default_config_dict)

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Iterable = ()) -> "RunConfig":
        doc = default_config_dict()
        if path is not None:
            try:
                _merge(doc, json.loads(Path(path).read_text()))
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: not valid JSON ({e})") from None
        cfg = cls(apply_overrides(doc, overrides))
        cfg.check()
        return cfg

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.doc, indent=2, sort_keys=True))

    def __getitem__(self, key: str):
        node = self.doc
        for p in key.split("."):
            node = node[p]
        return node

    def check(self) -> None:
        self.weights  # validates nonnegativity
        self.classes
        for stage in ("stage1", "stage3", "joint"):
            self.schedule(stage)
        if self.doc["duplication"] < 1:
            raise ConfigError("duplication must be at least 1")
        if not self.doc["init_offset"] > 0:
            raise ConfigError("init_offset must be positive")
        if self.doc["metrics"]["penetration_mode"] not in ("nearest", "literal"):
            raise ConfigError("metrics.penetration_mode must be 'nearest' or 'literal'")

    def require_paths(self, *keys: str) -> None:
        for k in keys:
            p = self.doc["paths"].get(k)
            if p is None or not Path(p).exists():
                raise ConfigError(f"paths.{k} is {p!r}, which does not exist")

    @property
    def weights(self) -> LossWeights:
        try:
            return LossWeights(**self.doc["weights"])
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None

    @property
    def classes(self) -> ClassTable:
        return ClassTable.from_dict(self.doc["classes"])

    def schedule(self, stage: str, seed_offset: int = 0) -> FitSchedule:
        d = dict(self.doc[stage])
        try:
            return FitSchedule(rng_seed=int(self.doc["seed"]) + seed_offset, **d)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{stage}: {e}") from None
