"""Strict JSON run configuration with defaults for every field.

One document covers the whole pipeline (scene, net, train, pretrain,
acquisition, experiment). Unknown keys are rejected so typos fail fast,
and the effective (default-merged) config is echoed into every output
directory.
"""

from __future__ import annotations

import json
from copy import deepcopy
from pathlib import Path

from .acquisition import AcquisitionConfig
from .contrastive import PretrainConfig
from .data import SceneSpec
from .experiment import ExperimentConfig
from .net import NetConfig, TrainConfig


class ConfigError(Exception):
    pass


DEFAULT_CONFIG: dict = {
    "seed": 0,
    "data": {
        "n_images": 400,
        "train_fraction": 0.75,
    },
    "scene": {
        "height": 32,
        "width": 32,
        "variant": "logic",
        "void_probability": 0.3,
        "void_radius_min": 1.0,
        "void_radius_max": 3.0,
        "noise_sigma": 0.05,
        "intensity_means": None,
    },
    "net": {
        "enc1_channels": 8,
        "enc2_channels": 16,
        "dec_channels": 8,
        "skip_connection": True,
    },
    "train": {
        "epochs": 50,
        "batch_size": 16,
        "learning_rate": 1e-3,
        "lr_drop_epoch": 25,
        "lr_drop_factor": 0.1,
        "rmsprop_decay": 0.9,
        "rmsprop_eps": 1e-8,
        "weight_decay": 1e-8,
        "flip_probability": 0.5,
    },
    "pretrain": {
        "temperature": 0.5,
        "epochs": 100,
        "batch_size": 32,
        "learning_rate": 1e-3,
        "crop_area_min": 0.6,
        "crop_area_max": 1.0,
        "flip_probability": 0.5,
        "brightness_jitter": 0.2,
        "hidden_dim": 16,
        "proj_dim": 8,
    },
    "acquisition": {
        "strategy": "rareness_aware",
        "use_rareness": True,
        "use_entropy": True,
        "use_diversity": True,
        "aggregator": "max",
        "budget": 20,
    },
    "experiment": {
        "budgets": [20, 40, 60, 80, 100],
        "seeds": [0, 1, 2, 3, 4],
        "init_mode": "none",
        "grid": "none",
        "export_overlays": False,
        "threads": 1,
    },
}


def _merge(defaults: dict, user: dict, path: str = "") -> dict:
    out = deepcopy(defaults)
    for key, value in user.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(defaults[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path=None, seed_override: int | None = None) -> dict:
    """Merge a JSON file (or nothing) over the defaults; strict keys."""
    user = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        try:
            user = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {p} is not valid JSON: {e}") from e
        if not isinstance(user, dict):
            raise ConfigError("config root must be a JSON object")
    cfg = _merge(DEFAULT_CONFIG, user)
    if seed_override is not None:
        cfg["seed"] = int(seed_override)
    return cfg


def echo_config(cfg: dict, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(cfg, indent=2) + "\n")


def make_scene_spec(cfg: dict) -> SceneSpec:
    s = cfg["scene"]
    try:
        return SceneSpec(
            height=s["height"],
            width=s["width"],
            variant=s["variant"],
            void_probability=s["void_probability"],
            void_radius_min=s["void_radius_min"],
            void_radius_max=s["void_radius_max"],
            noise_sigma=s["noise_sigma"],
            intensity_means=tuple(s["intensity_means"]) if s["intensity_means"] else None,
        )
    except ValueError as e:
        raise ConfigError(f"scene: {e}") from e


def make_net_config(cfg: dict, n_classes: int) -> NetConfig:
    n = cfg["net"]
    try:
        return NetConfig(
            in_channels=1,
            enc1_channels=n["enc1_channels"],
            enc2_channels=n["enc2_channels"],
            dec_channels=n["dec_channels"],
            n_classes=n_classes,
            skip_connection=n["skip_connection"],
        )
    except ValueError as e:
        raise ConfigError(f"net: {e}") from e


def make_train_config(cfg: dict, seed: int = 0) -> TrainConfig:
    t = cfg["train"]
    try:
        return TrainConfig(
            epochs=t["epochs"],
            batch_size=t["batch_size"],
            learning_rate=t["learning_rate"],
            lr_drop_epoch=t["lr_drop_epoch"],
            lr_drop_factor=t["lr_drop_factor"],
            rmsprop_decay=t["rmsprop_decay"],
            rmsprop_eps=t["rmsprop_eps"],
            weight_decay=t["weight_decay"],
            flip_probability=t["flip_probability"],
            seed=seed,
        )
    except ValueError as e:
        raise ConfigError(f"train: {e}") from e


def make_pretrain_config(cfg: dict) -> PretrainConfig:
    p = cfg["pretrain"]
    try:
        return PretrainConfig(
            temperature=p["temperature"],
            epochs=p["epochs"],
            batch_size=p["batch_size"],
            learning_rate=p["learning_rate"],
            crop_area_min=p["crop_area_min"],
            crop_area_max=p["crop_area_max"],
            flip_probability=p["flip_probability"],
            brightness_jitter=p["brightness_jitter"],
            hidden_dim=p["hidden_dim"],
            proj_dim=p["proj_dim"],
            seed=cfg["seed"],
        )
    except ValueError as e:
        raise ConfigError(f"pretrain: {e}") from e


def make_acquisition_config(cfg: dict) -> AcquisitionConfig:
    a = cfg["acquisition"]
    try:
        return AcquisitionConfig(
            strategy=a["strategy"],
            use_rareness=a["use_rareness"],
            use_entropy=a["use_entropy"],
            use_diversity=a["use_diversity"],
            aggregator=a["aggregator"],
            budget=a["budget"],
        )
    except ValueError as e:
        raise ConfigError(f"acquisition: {e}") from e


def make_experiment_config(cfg: dict, threads: int | None = None) -> ExperimentConfig:
    e = cfg["experiment"]
    try:
        return ExperimentConfig(
            budgets=tuple(e["budgets"]),
            seeds=tuple(e["seeds"]),
            init_mode=e["init_mode"],
            grid=e["grid"],
            export_overlays=e["export_overlays"],
            threads=e["threads"] if threads is None else threads,
        )
    except ValueError as err:
        raise ConfigError(f"experiment: {err}") from err
