"""Experiment configuration: strict JSON parsing with documented defaults."""

from __future__ import annotations

import json
import os

from .attacks import AttackSpec
from .training import DetectorSpec, TrainSpec

DATA_ROOT_ENV = "FASTADV_DATA_ROOT"


class ConfigError(Exception):
    pass


DATASET_DEFAULTS = {
    "mnist": {"kind": "mnist", "dir": "data/mnist"},
    "synthetic": {
        "kind": "synthetic",
        "n": 2048,
        "d": 20,
        "margin": 0.5,
        "eps_max": 0.3,
        "test_n": 512,
    },
}
MODEL_DEFAULTS = {"kind": "mnist_cnn", "num_classes": None}
ATTACK_DEFAULTS = {
    "epsilon": 0.3,
    "alpha": 0.3,
    "steps": 1,
    "restarts": 1,
    "init": "uniform",
    "clamp_image": True,
}
DETECTOR_DEFAULTS = {
    "pgd_steps": 5,
    "restarts": 1,
    "alpha": None,
    "probe_batch_index": 0,
    "floor": 0.20,
    "drop_margin": 0.50,
}
TRAIN_DEFAULTS = {
    "method": "fgsm",
    "epochs": 10,
    "batch_size": 128,
    "max_lr": 0.2,
    "momentum": 0.9,
    "weight_decay": 5e-4,
    "replay": 1,
    "shuffle": True,
    "monitor_examples": 512,
    "attack": ATTACK_DEFAULTS,
    "early_stop": None,
}
EVAL_DEFAULTS = {
    "pgd_steps": 50,
    "alpha": 0.01,
    "restarts": 10,
    "subset": None,
    "batch_size": 256,
}
TOP_DEFAULTS = {
    "dataset": DATASET_DEFAULTS["mnist"],
    "model": MODEL_DEFAULTS,
    "train": TRAIN_DEFAULTS,
    "eval": EVAL_DEFAULTS,
    "seed": 0,
    "precision": 32,
    "out": "runs/out",
}


def _merge(defaults, given, path):
    if given is None:
        return None
    out = dict(defaults)
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config key(s) at {path}: {sorted(unknown)}")
    for key, value in given.items():
        default = defaults[key]
        if isinstance(default, dict) and isinstance(value, dict):
            out[key] = _merge(default, value, f"{path}.{key}")
        else:
            out[key] = value
    return out


class ExperimentConfig:
    """Resolved experiment configuration; round-trips losslessly via JSON."""

    def __init__(self, raw=None):
        raw = raw or {}
        if not isinstance(raw, dict):
            raise ConfigError("config root must be an object")
        ds_raw = raw.get("dataset", {})
        if not isinstance(ds_raw, dict):
            raise ConfigError("$.dataset must be an object")
        dskind = ds_raw.get("kind", "mnist")
        if dskind not in DATASET_DEFAULTS:
            raise ConfigError(f"unknown dataset kind {dskind!r}")
        top_raw = {k: v for k, v in raw.items() if k != "dataset"}
        merged = _merge(TOP_DEFAULTS, top_raw, "$")
        merged["dataset"] = _merge(DATASET_DEFAULTS[dskind], ds_raw, "$.dataset")
        tr = raw.get("train", {})
        if tr.get("early_stop") is not None:
            merged["train"]["early_stop"] = _merge(
                DETECTOR_DEFAULTS, tr["early_stop"], "$.train.early_stop"
            )
        if merged["precision"] not in (32, 64):
            raise ConfigError("precision must be 32 or 64")
        self.data = merged
        # validate eagerly so bad specs fail at parse time
        self.train_spec()

    @classmethod
    def from_file(cls, path):
        try:
            with open(path) as f:
                raw = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config parse error: {exc}") from exc
        return cls(raw)

    def to_json(self):
        return json.dumps(self.data, indent=2, sort_keys=True)

    # -- derived objects ---------------------------------------------------

    def dataset_dir(self):
        root = os.environ.get(DATA_ROOT_ENV)
        return root if root else self.data["dataset"]["dir"]

    def attack_spec(self) -> AttackSpec:
        return AttackSpec(**self.data["train"]["attack"])

    def detector_spec(self):
        es = self.data["train"]["early_stop"]
        return DetectorSpec(**es) if es is not None else None

    def train_spec(self) -> TrainSpec:
        t = self.data["train"]
        try:
            return TrainSpec(
                method=t["method"],
                epochs=t["epochs"],
                batch_size=t["batch_size"],
                max_lr=t["max_lr"],
                momentum=t["momentum"],
                weight_decay=t["weight_decay"],
                attack=self.attack_spec() if t["method"] != "standard" else None,
                replay=t["replay"],
                early_stop=self.detector_spec(),
                seed=self.data["seed"],
                shuffle=t["shuffle"],
                monitor_examples=t["monitor_examples"],
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
