"""Run configuration: one JSON document, validated against documented defaults."""
from __future__ import annotations

import copy
import json

from .camera import CameraIntrinsics
from .cellgrid import CHANNELS, DEFAULT_VOXEL_SIZE
from .hpr import HULL_BACKENDS
from .model import ATTENTION_MODES, TARGETS
from .pc_io import DEFAULT_8I_SCALE, SYNTH_GENERATORS, TRAJECTORY_KINDS

__all__ = ["ConfigError", "DEFAULTS", "KEY_DOCS", "load_config", "validate_config",
           "flatten", "describe_keys"]

BASELINE_METHODS = ("LR", "TLR", "M-MLP", "M-LSTM")
EVAL_METHODS = ("model",) + BASELINE_METHODS


class ConfigError(ValueError):
    pass


_intr = CameraIntrinsics()

DEFAULTS = {
    "seed": 0,
    "paths": {
        "videos": "data/videos",
        "trajectories": "data/trajectories",
        "output": "out",
    },
    "video": {
        "source_scale": DEFAULT_8I_SCALE,
        "fps": 30.0,
        "angle_unit": "radians",
    },
    "grid": {"dims": [5, 6, 8], "connectivity": 6},
    "intrinsics": _intr.to_dict(),
    "features": {
        "gamma": 1.0,
        "voxel_size": DEFAULT_VOXEL_SIZE,
        "samples_per_cell": 64,
        "hull": "quickhull",
        "n_jobs": 1,
    },
    "model": {
        "hidden_dim": 128,
        "heads": 4,
        "graph_layers": 1,
        "history": 90,
        "attention": "softmax",
        "target": "visibility",
    },
    "train": {
        "lr": 3e-4,
        "batch_size": 32,
        "epochs": 30,
        "patience": 5,
        "dtype": "float32",
        "train_stride": 1,
        "eval_stride": 10,
    },
    "baselines": {
        "lr_history": 30,
        "history": 90,
        "mlp_hidden": 60,
        "lstm_hidden": 60,
        "lstm_layers": 2,
    },
    "split": {
        "train_videos": ["longdress", "loot", "redandblack"],
        "test_video": "soldier",
    },
    "eval": {
        "horizons": [10, 30, 60, 150],
        "targets": ["visibility", "viewport"],
        "methods": list(EVAL_METHODS),
    },
    "correlate": {
        "video": "",
        "channel": "f",
        "cell": -1,
        "count": 5,
    },
    "synth": {
        "videos": {"sphere": "static-sphere", "box": "translating-box", "figure": "orbiting-camera"},
        "frames": 120,
        "points": 3000,
        "users": 3,
        "trajectory": "wander",
        "camera_radius": 2.5,
    },
    "bench": {
        "points": 100000,
        "frames": 5,
        "downsample": 8,
    },
}

KEY_DOCS = {
    "seed": "global seed for synthesis, initialisation and shuffling",
    "paths.videos": "directory of <video>/*.ply frame sequences",
    "paths.trajectories": "directory of <video>/<user>.csv viewer trajectories",
    "paths.output": "root for features/, checkpoints/, predictions/, reports/",
    "video.source_scale": "meters per PLY coordinate unit (8i: 1.8/1024)",
    "video.fps": "frame rate used to convert horizons to milliseconds",
    "video.angle_unit": "trajectory angle unit: radians | degrees",
    "grid.dims": "cells along x, y, z",
    "grid.connectivity": "grid graph neighbourhood: 6 | 26",
    "intrinsics.fx": "focal length x (pixels)",
    "intrinsics.fy": "focal length y (pixels)",
    "intrinsics.cx": "principal point x (pixels)",
    "intrinsics.cy": "principal point y (pixels)",
    "intrinsics.width": "image width (pixels)",
    "intrinsics.height": "image height (pixels)",
    "intrinsics.d_near": "near clipping depth (m)",
    "intrinsics.d_far": "far clipping depth (m)",
    "features.gamma": "HPR flip radius exponent: R = 10**gamma * max distance",
    "features.voxel_size": "voxel edge (m) for downsampling before HPR",
    "features.samples_per_cell": "lattice samples per cell for the viewport feature (a cube)",
    "features.hull": "convex hull backend: quickhull | qhull",
    "features.n_jobs": "threads for per-frame extraction",
    "model.hidden_dim": "hidden state width",
    "model.heads": "attention heads (must divide hidden_dim)",
    "model.graph_layers": "stacked graph attention layers per step",
    "model.history": "observed frames per window",
    "model.attention": "attention normalisation: softmax | raw-ratio",
    "model.target": "predicted channel: visibility | viewport",
    "train.lr": "Adam learning rate",
    "train.batch_size": "windows per optimisation step",
    "train.epochs": "maximum epochs",
    "train.patience": "early stopping patience on validation MSE",
    "train.dtype": "float32 | float64",
    "train.train_stride": "window stride on training videos",
    "train.eval_stride": "window stride on validation/test halves",
    "baselines.lr_history": "frames used by LR and TLR",
    "baselines.history": "frames used by M-MLP and M-LSTM",
    "baselines.mlp_hidden": "units in each of the two M-MLP hidden layers",
    "baselines.lstm_hidden": "units per M-LSTM layer",
    "baselines.lstm_layers": "M-LSTM depth",
    "split.train_videos": "videos used for training",
    "split.test_video": "video whose first half is test and second half validation",
    "eval.horizons": "prediction horizons in frames",
    "eval.targets": "targets to evaluate",
    "eval.methods": "subset of model, LR, TLR, M-MLP, M-LSTM",
    "correlate.video": "video to analyse (empty: split.test_video)",
    "correlate.channel": "feature channel to correlate",
    "correlate.cell": "reference cell for the per-axis matrices (-1: most variable)",
    "correlate.count": "cells per axis in the per-axis matrices",
    "synth.videos": "mapping video name -> generator",
    "synth.frames": "frames per synthetic video",
    "synth.points": "points per synthetic frame",
    "synth.users": "trajectories per synthetic video",
    "synth.trajectory": "viewer trajectory kind",
    "synth.camera_radius": "viewer distance from the content centroid (m)",
    "bench.points": "points in the synthetic benchmark frame",
    "bench.frames": "timed frames per backend",
    "bench.downsample": "voxel size in source units (8i scale) before HPR",
}

_CHOICES = {
    "video.angle_unit": ("radians", "degrees"),
    "grid.connectivity": (6, 26),
    "features.hull": HULL_BACKENDS,
    "model.attention": ATTENTION_MODES,
    "model.target": TARGETS,
    "train.dtype": ("float32", "float64"),
    "correlate.channel": CHANNELS,
    "synth.trajectory": TRAJECTORY_KINDS,
}
_POSITIVE = {
    "video.source_scale", "video.fps", "features.voxel_size", "features.samples_per_cell",
    "features.n_jobs", "model.hidden_dim", "model.heads", "model.graph_layers", "model.history",
    "train.lr", "train.batch_size", "train.epochs", "train.patience", "train.train_stride",
    "train.eval_stride", "baselines.lr_history", "baselines.history", "baselines.mlp_hidden",
    "baselines.lstm_hidden", "baselines.lstm_layers", "synth.frames", "synth.points", "synth.users",
    "synth.camera_radius", "bench.points", "bench.frames", "bench.downsample", "correlate.count",
}


def flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and key != "synth.videos":
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def describe_keys() -> str:
    lines = ["config keys (JSON, dotted = nested) and defaults:"]
    for key, default in flatten(DEFAULTS).items():
        lines.append(f"  {key} = {json.dumps(default)}")
        lines.append(f"      {KEY_DOCS[key]}")
    return "\n".join(lines)


def _merge(base: dict, over: dict, prefix: str = "") -> None:
    for k, v in over.items():
        key = f"{prefix}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(base[k], dict) and key != "synth.videos":
            if not isinstance(v, dict):
                raise ConfigError(f"config key {key!r} must be an object")
            _merge(base[k], v, key + ".")
        else:
            base[k] = v


def _check_type(key, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    elif isinstance(default, dict):
        ok = isinstance(value, dict)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"config key {key!r} expects {type(default).__name__}, got {value!r}")


def validate_config(cfg: dict) -> dict:
    flat = flatten(cfg)
    defaults = flatten(DEFAULTS)
    for key, value in flat.items():
        _check_type(key, value, defaults[key])
        if key in _CHOICES and value not in _CHOICES[key]:
            raise ConfigError(f"config key {key!r} must be one of {list(_CHOICES[key])}, got {value!r}")
        if key in _POSITIVE and not value > 0:
            raise ConfigError(f"config key {key!r} must be positive, got {value!r}")
    dims = flat["grid.dims"]
    if len(dims) != 3 or not all(isinstance(d, int) and d > 0 for d in dims):
        raise ConfigError(f"grid.dims must be three positive integers, got {dims!r}")
    if flat["model.hidden_dim"] % flat["model.heads"]:
        raise ConfigError("model.hidden_dim must be divisible by model.heads")
    hz = flat["eval.horizons"]
    if not hz or not all(isinstance(h, int) and h > 0 for h in hz):
        raise ConfigError(f"eval.horizons must be positive integers, got {hz!r}")
    for t in flat["eval.targets"]:
        if t not in TARGETS:
            raise ConfigError(f"eval.targets entries must be in {list(TARGETS)}, got {t!r}")
    for m in flat["eval.methods"]:
        if m not in EVAL_METHODS:
            raise ConfigError(f"eval.methods entries must be in {list(EVAL_METHODS)}, got {m!r}")
    if flat["split.test_video"] in flat["split.train_videos"]:
        raise ConfigError("split.test_video must not be a training video")
    for name, gen in flat["synth.videos"].items():
        if gen not in SYNTH_GENERATORS:
            raise ConfigError(f"synth.videos[{name!r}] must be one of {list(SYNTH_GENERATORS)}")
    try:
        CameraIntrinsics(**cfg["intrinsics"])
    except ValueError as exc:
        raise ConfigError(f"intrinsics: {exc}") from None
    s = flat["features.samples_per_cell"]
    if round(s ** (1 / 3)) ** 3 != s:
        raise ConfigError("features.samples_per_cell must be a perfect cube")
    return cfg


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the JSON file at ``path``, then ``overrides`` (same shape)."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        _merge(cfg, doc)
    if overrides:
        _merge(cfg, overrides)
    return validate_config(cfg)
