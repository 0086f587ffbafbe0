"""Windowing, splits, metrics and comparison reports."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .cellgrid import CHANNELS

log = logging.getLogger(__name__)

__all__ = [
    "REPORT_COLUMNS",
    "DEFAULT_HORIZONS",
    "MissingCheckpointError",
    "WindowedSample",
    "WindowSet",
    "SplitSpec",
    "make_windows",
    "stack_windows",
    "split_windows",
    "mse_metric",
    "R2Result",
    "r2_metric",
    "frames_to_ms",
    "ReportRow",
    "evaluate",
    "ground_truth_method",
    "config_fingerprint",
    "write_report_csv",
    "write_report_json",
]

REPORT_COLUMNS = ("method", "target", "horizon_frames", "horizon_ms", "mse", "r2", "n_windows")
DEFAULT_HORIZONS = (10, 30, 60, 150)
_TARGET_CHANNEL = {"visibility": CHANNELS.index("v"), "viewport": CHANNELS.index("f")}


class MissingCheckpointError(RuntimeError):
    def __init__(self, horizon, what="checkpoint"):
        self.horizon = horizon
        super().__init__(f"missing {what} for horizon {horizon}")


@dataclass(frozen=True)
class WindowedSample:
    """History ``G^1..h`` plus what is known about frame ``h + f``.

    ``target_frame`` is relative to the sequence start: the window starting
    at ``start`` observes frames ``start .. start+h-1`` and targets
    ``start + h - 1 + f``.
    """

    history: np.ndarray          # (h, cells, channels)
    target_features: np.ndarray  # (cells, channels) at the target frame
    occupancy: np.ndarray        # (cells,) point counts at the target frame
    start: int
    target_frame: int
    source: tuple = ("", "")
    poses: np.ndarray | None = None        # (h, 6)
    target_pose: np.ndarray | None = None  # (6,)

    def y(self, target: str) -> np.ndarray:
        return target_values(self.target_features, self.occupancy, target)


def target_values(target_features, occupancy, target: str) -> np.ndarray:
    """``Y = M * V`` (or ``M * F``) from target-frame features."""
    if target not in _TARGET_CHANNEL:
        raise ValueError(f"target must be one of {tuple(_TARGET_CHANNEL)}, got {target!r}")
    m = (np.asarray(occupancy) > 0).astype(np.float64)
    return np.asarray(target_features)[..., _TARGET_CHANNEL[target]] * m


@dataclass
class WindowSet:
    """Stacked windows; the array form every predictor consumes."""

    X: np.ndarray            # (W, h, cells, channels)
    target_features: np.ndarray  # (W, cells, channels)
    occupancy: np.ndarray    # (W, cells)
    target_frames: np.ndarray
    sources: list = field(default_factory=list)
    poses: np.ndarray | None = None        # (W, h, 6)
    target_poses: np.ndarray | None = None  # (W, 6)

    def __len__(self):
        return len(self.X)

    def y(self, target: str) -> np.ndarray:
        return target_values(self.target_features, self.occupancy, target)


def make_windows(features, h: int, f: int, stride: int = 1, occupancy=None, poses=None,
                 source=("", ""), offset: int = 0) -> list:
    """Sliding windows over a ``(T, cells, channels)`` feature sequence.

    Count is ``floor((T - h - f) / stride) + 1``; a sequence shorter than
    ``h + f`` yields no windows and a warning. ``occupancy`` defaults to the
    normalised occupancy channel (only ``> 0`` matters). ``offset`` is added
    to reported frame positions when windowing a slice of a longer sequence.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"features must be (T, cells, channels), got {x.shape}")
    if h < 1 or f < 1 or stride < 1:
        raise ValueError("h, f and stride must be >= 1")
    T = x.shape[0]
    occ = x[..., CHANNELS.index("occupancy_norm")] if occupancy is None else np.asarray(occupancy)
    if occ.shape != x.shape[:2]:
        raise ValueError(f"occupancy must be (T, cells), got {occ.shape}")
    if poses is not None:
        poses = np.asarray(poses, dtype=np.float64)
        if poses.shape != (T, 6):
            raise ValueError(f"poses must be ({T}, 6), got {poses.shape}")
    if T < h + f:
        log.warning("sequence %s of length %d is shorter than h + f = %d; no windows",
                    source, T, h + f)
        return []
    out = []
    for s in range(0, T - h - f + 1, stride):
        tgt = s + h - 1 + f
        out.append(WindowedSample(
            history=x[s:s + h],
            target_features=x[tgt],
            occupancy=occ[tgt],
            start=offset + s,
            target_frame=offset + tgt,
            source=tuple(source),
            poses=None if poses is None else poses[s:s + h],
            target_pose=None if poses is None else poses[tgt],
        ))
    return out


def stack_windows(samples: Sequence[WindowedSample]) -> WindowSet:
    if not samples:
        raise ValueError("no windows to stack")
    has_poses = all(s.poses is not None for s in samples)
    return WindowSet(
        X=np.stack([s.history for s in samples]),
        target_features=np.stack([s.target_features for s in samples]),
        occupancy=np.stack([s.occupancy for s in samples]),
        target_frames=np.array([s.target_frame for s in samples]),
        sources=[s.source for s in samples],
        poses=np.stack([s.poses for s in samples]) if has_poses else None,
        target_poses=np.stack([s.target_pose for s in samples]) if has_poses else None,
    )


@dataclass(frozen=True)
class SplitSpec:
    """Train on whole videos; on the test video each user's first half in
    time is test and the second half validation."""

    train_videos: tuple
    test_video: str

    def __post_init__(self):
        if self.test_video in self.train_videos:
            raise ValueError(f"test video {self.test_video!r} is also a training video")


def split_windows(sequences: Mapping, split: SplitSpec, h: int, f: int, train_stride: int = 1,
                  eval_stride: int = 10) -> dict:
    """Window every ``(video, user) -> dict(features=, occupancy=, poses=)`` entry.

    Test and validation windows are cut inside their own half, so no window
    crosses the boundary. Videos in neither role are ignored.
    """
    out = {"train": [], "val": [], "test": []}
    for key in sorted(sequences):
        video, user = key
        seq = sequences[key]
        feats = np.asarray(seq["features"])
        occ = seq.get("occupancy")
        poses = seq.get("poses")
        if video in split.train_videos:
            out["train"] += make_windows(feats, h, f, train_stride, occ, poses, key)
        elif video == split.test_video:
            half = len(feats) // 2
            for part, sl in (("test", slice(0, half)), ("val", slice(half, len(feats)))):
                out[part] += make_windows(
                    feats[sl], h, f, eval_stride,
                    None if occ is None else np.asarray(occ)[sl],
                    None if poses is None else np.asarray(poses)[sl],
                    key, offset=sl.start)
    return out


def _check_pair(pred, y):
    pred = np.asarray(pred, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if pred.shape != y.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match target shape {y.shape}")
    if pred.size == 0:
        raise ValueError("empty prediction")
    return pred, y


def mse_metric(pred, y) -> float:
    pred, y = _check_pair(pred, y)
    return float(np.mean((pred - y) ** 2))


@dataclass(frozen=True)
class R2Result:
    score: float
    degenerate: bool = False

    def __float__(self):
        return self.score


def r2_metric(pred, y) -> R2Result:
    """Pooled ``1 - SS_res / SS_tot``; constant ``y`` is flagged and scored 0."""
    pred, y = _check_pair(pred, y)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        return R2Result(0.0, True)
    ss_res = float(np.sum((y - pred) ** 2))
    return R2Result(1.0 - ss_res / ss_tot, False)


def frames_to_ms(frames: int, fps: float = 30.0) -> int:
    return int(round(frames * 1000.0 / fps))


@dataclass(frozen=True)
class ReportRow:
    method: str
    target: str
    horizon_frames: int
    horizon_ms: int
    mse: float
    r2: float
    n_windows: int
    r2_degenerate: bool = False

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in REPORT_COLUMNS + ("r2_degenerate",)}


def ground_truth_method(windows: WindowSet, target: str, horizon: int) -> np.ndarray:
    return windows.y(target)


def evaluate(methods: Mapping[str, Callable], windows_by_horizon: Mapping[int, WindowSet],
             horizons=DEFAULT_HORIZONS, targets=("visibility", "viewport"),
             fps: float = 30.0) -> list:
    """Score every ``method(windows, target, horizon) -> (W, cells)``.

    Rows come out in ``methods`` order, then target, then horizon. A
    horizon without windows raises :class:`MissingCheckpointError`.
    """
    rows = []
    for name, method in methods.items():
        for target in targets:
            for f in horizons:
                if f not in windows_by_horizon:
                    raise MissingCheckpointError(f, "evaluation windows")
                ws = windows_by_horizon[f]
                y = ws.y(target)
                pred = method(ws, target, f)
                r2 = r2_metric(pred, y)
                rows.append(ReportRow(name, target, int(f), frames_to_ms(f, fps),
                                      mse_metric(pred, y), r2.score, len(ws), r2.degenerate))
    return rows


def config_fingerprint(config) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def write_report_csv(path, rows: Sequence[ReportRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([r.method, r.target, r.horizon_frames, r.horizon_ms,
                        repr(float(r.mse)), repr(float(r.r2)), r.n_windows])


def write_report_json(path, rows: Sequence[ReportRow], config=None) -> None:
    doc = {
        "config_fingerprint": config_fingerprint(config or {}),
        "columns": list(REPORT_COLUMNS),
        "rows": [r.as_dict() for r in rows],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
