"""Experiment configuration: one JSON document per experiment plus overrides.

Layout::

    seed        shared by synthesis, splitting, model init and training
    run_dir     default output directory
    synth       synthetic phantom settings
    split       ratios and split granularity
    partition   site groups, one teacher per group
    teacher     reference teacher architecture
    student     reference student architecture
    train       training options (everything in TrainConfig except seed)
    expect      optional checks applied by ``--dry-run``
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict
from pathlib import Path

from .models import DEFAULT_STUDENT, DEFAULT_TEACHER
from .training import TrainConfig


class ConfigError(ValueError):
    pass


EXPECT_KEYS = {"split_sizes", "shard_sites", "input_shape", "epochs", "n_teachers"}


def _train_defaults() -> dict:
    d = TrainConfig().to_dict()
    d.pop("seed")
    return d


def default_config() -> dict:
    return {
        "seed": 0,
        "run_dir": "runs/default",
        "synth": {"n_per_site": 100, "n_sites": 3, "size": 96, "slices_per_patient": 5},
        "split": {"ratios": [0.8, 0.05, 0.15], "by_patient": True},
        "partition": {"pairs": [[1, 2], [3, 4], [5, 6]]},
        "teacher": asdict(DEFAULT_TEACHER),
        "student": asdict(DEFAULT_STUDENT),
        "train": _train_defaults(),
        "expect": {},
    }


# Multi-site protocol at full scale: slice-level 80/5/15 split, one teacher
# per site pair, 384x384 inputs, 100 epochs.
PROTOCOL = {
    "run_dir": "runs/protocol",
    "split": {"ratios": [0.8, 0.05, 0.15], "by_patient": False},
    "partition": {"pairs": [[1, 2], [3, 4], [5, 6]]},
    "train": {"input_hw": [384, 384], "epochs": 100, "lr_max": 0.01, "lr_min": 1e-6, "cyclic_step_size": 2000},
    "expect": {
        "split_sizes": [1392, 87, 261],
        "shard_sites": [[1, 2], [3, 4], [5, 6]],
        "input_shape": [1, 1, 384, 384],
        "epochs": 100,
        "n_teachers": 3,
    },
}

# Desk-scale synthetic experiment: six sites, 96x96 phantoms, 600/60/120
# slices. Students train for 10 epochs with a half-run cycle (75 steps per
# epoch); teachers are run with train.epochs=15 and a matching step size.
# Only the first encoder stages are paired for the mid-level loss.
DESK = {
    "run_dir": "runs/desk",
    "synth": {"n_per_site": 130, "n_sites": 6, "size": 96, "slices_per_patient": 5},
    "split": {"ratios": [600 / 780, 60 / 780, 120 / 780], "by_patient": False},
    "partition": {"pairs": [[1, 2], [3, 4], [5, 6]]},
    "teacher": {"base_channels": 8, "depth": 4, "convs_per_block": 2, "tap_stages": [0, 3, 6]},
    "student": {"base_channels": 4, "depth": 3, "convs_per_block": 1, "tap_stages": [0, 2, 4]},
    "train": {
        "input_hw": [96, 96], "epochs": 10, "batch_size": 8, "lr_max": 0.01, "lr_min": 1e-6,
        "cyclic_step_size": 375, "pairing": [["enc0", "enc0"]],
    },
}

BUILTIN = {"default": {}, "protocol": PROTOCOL, "desk": DESK}


def merge(base: dict, update: dict, path: str = "") -> dict:
    """Recursively apply ``update`` to ``base``; unknown keys are rejected."""
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in out:
            raise ConfigError(f"unknown config key {where!r}")
        if path == "" and key == "expect":
            if not isinstance(value, dict):
                raise ConfigError("config key 'expect' must be an object")
            unknown = sorted(set(value) - EXPECT_KEYS)
            if unknown:
                raise ConfigError(f"unknown expectation(s) {unknown}; known: {sorted(EXPECT_KEYS)}")
            out[key] = {**out[key], **copy.deepcopy(value)}
        elif isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = merge(out[key], value, where + ".")
        else:
            out[key] = value
    return out


def load_config(source: str | None) -> dict:
    """Defaults, then a built-in name or a JSON file."""
    cfg = default_config()
    if source is None:
        return cfg
    if source in BUILTIN:
        return merge(cfg, BUILTIN[source])
    path = Path(source)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return merge(cfg, data)


def parse_value(text: str):
    try:
        return json.loads(text)
    except ValueError:
        return text


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as JSON when possible."""
    for item in overrides or []:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not key=value")
        update: dict = {}
        node = update
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = parse_value(raw)
        cfg = merge(cfg, update)
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig.from_dict({**cfg["train"], "seed": cfg["seed"]})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid train section: {exc}") from exc
