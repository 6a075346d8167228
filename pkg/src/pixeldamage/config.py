"""Run configuration: a JSON document with data/model/train/fusion/runtime sections.

Every key has a default, so an empty document ``{}`` is a complete config.
Unknown keys anywhere are rejected.
"""

from __future__ import annotations

import copy
import json
import os
from pathlib import Path

import numpy as np

from .architectures import ARCHS, KEEP_PROB, ROLES, WEIGHT_DECAY
from .data import INPUT_SIZE
from .fusion import DEFAULT_THRESHOLDS, SEGMENTER_THRESHOLD, FusionConfig
from .training import BATCH_SIZE, DEFAULT_SEGMENTS, Schedule, TrainConfig


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "data": {"dir": None, "split_seed": 0, "size": INPUT_SIZE, "split_manifest": None},
    "model": {"arch": "resnet23", "role": "classifier", "keep_prob": KEEP_PROB},
    "train": {
        "schedule": [list(s) for s in DEFAULT_SEGMENTS],
        "batch_size": BATCH_SIZE,
        "lambda": None,  # None: per-architecture default
        "momentum": 0.0,
        "checkpoint_every": 10,
        "eval_every": 1,
        "augment": True,
        "class_balance": True,
    },
    "fusion": {"thresholds": list(DEFAULT_THRESHOLDS), "segmenter_threshold": SEGMENTER_THRESHOLD},
    "runtime": {"seed": 0, "thread_count": None, "precision": "float32"},
}


def _merge(defaults: dict, given: dict, path: str) -> dict:
    if not isinstance(given, dict):
        raise ConfigError(f"{path or 'config'} must be a JSON object")
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(path + k for k in unknown)}")
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        out[k] = _merge(defaults[k], v, f"{path}{k}.") if isinstance(defaults[k], dict) else v
    return out


class RunConfig:
    def __init__(self, doc: dict | None = None):
        self.doc = _merge(DEFAULTS, doc or {}, "")
        self._validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from None
        return cls(doc)

    def _validate(self):
        m, t, r = self.doc["model"], self.doc["train"], self.doc["runtime"]
        if m["arch"] not in ARCHS:
            raise ConfigError(f"model.arch must be one of {ARCHS}, got {m['arch']!r}")
        if m["role"] not in ROLES:
            raise ConfigError(f"model.role must be one of {ROLES}, got {m['role']!r}")
        if r["precision"] not in ("float32", "float64"):
            raise ConfigError(f"runtime.precision must be float32 or float64, got {r['precision']!r}")
        if r["thread_count"] is not None and int(r["thread_count"]) < 1:
            raise ConfigError("runtime.thread_count must be >= 1")
        try:
            self.schedule
            self.fusion.validate()
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None
        if t["lambda"] is not None and t["lambda"] < 0:
            raise ConfigError("train.lambda must be >= 0")

    def __getitem__(self, section):
        return self.doc[section]

    def override(self, section: str, key: str, value):
        """Set one value if ``value`` is not None (used for command-line flags)."""
        if value is not None:
            self.doc[section][key] = value
            self._validate()
        return self

    @property
    def arch(self):
        return self.doc["model"]["arch"]

    @property
    def role(self):
        return self.doc["model"]["role"]

    @property
    def seed(self) -> int:
        return int(self.doc["runtime"]["seed"])

    @property
    def dtype(self):
        return np.dtype(self.doc["runtime"]["precision"])

    @property
    def weight_decay(self) -> float:
        lam = self.doc["train"]["lambda"]
        return WEIGHT_DECAY[self.arch] if lam is None else float(lam)

    @property
    def schedule(self) -> Schedule:
        t = self.doc["train"]
        return Schedule(tuple((int(e), float(lr)) for e, lr in t["schedule"]), int(t["batch_size"]))

    @property
    def fusion(self) -> FusionConfig:
        f = self.doc["fusion"]
        return FusionConfig(tuple(f["thresholds"]), float(f["segmenter_threshold"]))

    def train_config(self) -> TrainConfig:
        t = self.doc["train"]
        return TrainConfig(self.schedule, momentum=float(t["momentum"]), weight_decay=self.weight_decay,
                           augment=bool(t["augment"]), checkpoint_every=int(t["checkpoint_every"]),
                           eval_every=int(t["eval_every"]), class_balance=bool(t["class_balance"]))

    @property
    def thread_count(self) -> int:
        n = self.doc["runtime"]["thread_count"]
        return int(n) if n is not None else (os.cpu_count() or 1)

    def to_json(self) -> dict:
        return copy.deepcopy(self.doc)
