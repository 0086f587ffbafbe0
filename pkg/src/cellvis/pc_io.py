"""Point cloud and trajectory ingestion, voxel resampling and synthetic scenes."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .camera import Pose6DoF, look_at

__all__ = [
    "PlyError",
    "LengthMismatchError",
    "TrajectorySchemaError",
    "TrajectoryOrderError",
    "SynthConfigError",
    "DEFAULT_8I_SCALE",
    "PointCloudFrame",
    "FrameSequence",
    "VoxelMapping",
    "TrajectoryRecord",
    "load_ply",
    "write_ply",
    "load_sequence",
    "to_world_meters",
    "voxel_downsample",
    "upsample_visibility",
    "load_trajectory_csv",
    "write_trajectory_csv",
    "trajectory_array",
    "SYNTH_GENERATORS",
    "synth_scene",
    "synth_trajectory",
    "synth_body",
]

# 10-bit 8i coordinates; tallest subject spans ~1.8 m.
DEFAULT_8I_SCALE = 1.8 / 1024


class PlyError(ValueError):
    pass


class LengthMismatchError(PlyError):
    pass


class TrajectorySchemaError(ValueError):
    pass


class TrajectoryOrderError(ValueError):
    pass


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PointCloudFrame:
    """One frame of a point cloud video.

    ``positions`` is ``(n, 3)`` float64 in source units (meters once
    ``source_scale`` has been applied), ``colors`` is ``(n, 3)`` uint8.
    """

    frame_index: int
    positions: np.ndarray
    colors: np.ndarray | None = None
    source_scale: float = 1.0

    def __post_init__(self):
        if self.frame_index < 0:
            raise ValueError("frame_index must be non-negative")
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pos)):
            raise ValueError("point positions must be finite")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        if self.colors is not None:
            col = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
            if len(col) != len(pos):
                raise ValueError("colors and positions differ in length")
            col.setflags(write=False)
            object.__setattr__(self, "colors", col)

    def __len__(self):
        return len(self.positions)


@dataclass(frozen=True)
class FrameSequence:
    frames: tuple
    fps: float = 30.0

    def __post_init__(self):
        frames = tuple(self.frames)
        idx = [f.frame_index for f in frames]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("frame indices must be strictly increasing")
        object.__setattr__(self, "frames", frames)

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, i):
        return self.frames[i]

    def __iter__(self):
        return iter(self.frames)


@dataclass(frozen=True)
class VoxelMapping:
    """Downsampled-to-original correspondence.

    ``inverse[k]`` is the representative of original point ``k``; the
    ``representative_of`` sets are derived from it and therefore always
    partition the original index range.
    """

    voxel_size: float
    inverse: np.ndarray
    n_representatives: int

    @property
    def n_original(self) -> int:
        return len(self.inverse)

    @property
    def representative_of(self) -> list:
        order = np.argsort(self.inverse, kind="stable")
        bounds = np.searchsorted(self.inverse[order], np.arange(self.n_representatives + 1))
        return [order[bounds[i]:bounds[i + 1]] for i in range(self.n_representatives)]


@dataclass(frozen=True)
class TrajectoryRecord:
    frame_index: int
    pose: Pose6DoF


# ---------------------------------------------------------------------------
# PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_header(fh):
    """Return (format, elements, header_byte_length)."""
    first = fh.readline()
    if first.strip() != b"ply":
        raise PlyError(f"line 1: expected 'ply', got {first.strip()!r}")
    fmt = None
    elements = []  # [name, count, [(prop, dtype)]]
    lineno = 1
    while True:
        raw = fh.readline()
        lineno += 1
        if not raw:
            raise PlyError(f"line {lineno}: header ended without 'end_header'")
        line = raw.decode("ascii", errors="replace").strip()
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "end_header":
            break
        if tok[0] == "format":
            if len(tok) != 3 or tok[1] not in ("ascii", "binary_little_endian"):
                raise PlyError(f"line {lineno}: unsupported format {line!r}")
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise PlyError(f"line {lineno}: malformed element {line!r}")
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            if not elements:
                raise PlyError(f"line {lineno}: property before any element: {line!r}")
            if tok[1] == "list":
                if elements[-1][0] == "vertex":
                    raise PlyError(f"line {lineno}: list properties on vertex unsupported")
                elements[-1][2].append((tok[-1], None))
                continue
            if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                raise PlyError(f"line {lineno}: malformed property {line!r}")
            elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
        else:
            raise PlyError(f"line {lineno}: unexpected header line {line!r}")
    if fmt is None:
        raise PlyError("header has no format line")
    return fmt, elements, fh.tell()


def load_ply(path, frame_index: int = 0) -> PointCloudFrame:
    """Read the vertex element of an ascii or binary little-endian PLY file."""
    with open(path, "rb") as fh:
        fmt, elements, _ = _parse_header(fh)
        body = fh.read()
    vertex = next((e for e in elements if e[0] == "vertex"), None)
    if vertex is None:
        raise PlyError("header declares no vertex element")
    if elements[0][0] != "vertex":
        raise PlyError("vertex element must come first")
    _, count, props = vertex
    names = [p for p, _ in props]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise PlyError(f"vertex element lacks property {axis!r}")
    dtype = np.dtype([(p, "<" + t) for p, t in props])

    if fmt == "binary_little_endian":
        need = count * dtype.itemsize
        if len(body) < need:
            raise LengthMismatchError(
                f"header declares {count} vertices ({need} bytes), body has {len(body)} bytes")
        data = np.frombuffer(body, dtype=dtype, count=count)
        cols = {p: data[p] for p in names}
    else:
        lines = body.decode("ascii").splitlines()
        rows = [ln.split() for ln in lines if ln.strip()][:count]
        if len(rows) < count:
            raise LengthMismatchError(f"header declares {count} vertices, body has {len(rows)}")
        if any(len(r) != len(props) for r in rows):
            bad = next(i for i, r in enumerate(rows) if len(r) != len(props))
            raise PlyError(f"vertex {bad}: expected {len(props)} values, got {len(rows[bad])}")
        table = np.array(rows, dtype=np.float64).reshape(count, len(props))
        cols = {p: table[:, i] for i, p in enumerate(names)}

    positions = np.stack([cols["x"], cols["y"], cols["z"]], axis=1).astype(np.float64)
    colors = None
    if all(c in cols for c in ("red", "green", "blue")):
        colors = np.stack([cols["red"], cols["green"], cols["blue"]], axis=1).astype(np.uint8)
    return PointCloudFrame(frame_index, positions, colors)


def write_ply(path, frame: PointCloudFrame, binary: bool = True) -> None:
    n = len(frame)
    has_color = frame.colors is not None
    header = ["ply",
              "format " + ("binary_little_endian" if binary else "ascii") + " 1.0",
              f"element vertex {n}",
              "property double x", "property double y", "property double z"]
    if has_color:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    if has_color:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    data = np.empty(n, dtype=fields)
    for i, ax in enumerate("xyz"):
        data[ax] = frame.positions[:, i]
    if has_color:
        for i, ch in enumerate(("red", "green", "blue")):
            data[ch] = frame.colors[:, i]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(data.tobytes())
        else:
            for row in data:
                fh.write((" ".join(repr(v.item()) for v in row) + "\n").encode("ascii"))


def load_sequence(directory, source_scale: float = 1.0, fps: float = 30.0) -> FrameSequence:
    """Load every ``*.ply`` in ``directory`` (sorted by name) as consecutive frames."""
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(".ply"))
    if not names:
        raise FileNotFoundError(f"no .ply files in {directory}")
    frames = []
    for i, name in enumerate(names):
        f = load_ply(os.path.join(directory, name), frame_index=i)
        if source_scale != 1.0:
            f = to_world_meters(f, source_scale)
        frames.append(f)
    return FrameSequence(tuple(frames), fps)


def to_world_meters(frame: PointCloudFrame, source_scale: float = DEFAULT_8I_SCALE) -> PointCloudFrame:
    if not source_scale > 0:
        raise ValueError(f"source_scale must be positive, got {source_scale}")
    return PointCloudFrame(frame.frame_index, frame.positions * source_scale,
                           frame.colors, frame.source_scale * source_scale)


# ---------------------------------------------------------------------------
# voxel resampling

def voxel_downsample(frame: PointCloudFrame, voxel_size: float):
    """Replace the points of each occupied voxel by their centroid.

    Representatives are ordered by voxel key, so the result is
    deterministic. Returns ``(downsampled_frame, mapping)``.
    """
    if not voxel_size > 0:
        raise ValueError("voxel_size must be positive")
    pts = frame.positions
    if len(pts) == 0:
        return (PointCloudFrame(frame.frame_index, pts, frame.colors, frame.source_scale),
                VoxelMapping(voxel_size, np.zeros(0, dtype=np.int64), 0))
    keys = np.floor(pts / voxel_size).astype(np.int64)
    keys -= keys.min(axis=0)
    span = keys.max(axis=0) + 1
    flat = (keys[:, 2] * span[1] + keys[:, 1]) * span[0] + keys[:, 0]
    _, inverse = np.unique(flat, return_inverse=True)
    inverse = inverse.reshape(-1).astype(np.int64)
    m = int(inverse.max()) + 1
    counts = np.bincount(inverse, minlength=m).astype(np.float64)
    centroids = np.stack([np.bincount(inverse, weights=pts[:, k], minlength=m) for k in range(3)],
                         axis=1) / counts[:, None]
    colors = None
    if frame.colors is not None:
        colors = np.stack([np.bincount(inverse, weights=frame.colors[:, k].astype(np.float64),
                                       minlength=m) for k in range(3)], axis=1) / counts[:, None]
        colors = np.rint(colors).astype(np.uint8)
    down = PointCloudFrame(frame.frame_index, centroids, colors, frame.source_scale)
    return down, VoxelMapping(voxel_size, inverse, m)


def upsample_visibility(mapping: VoxelMapping, visible_downsampled_indices) -> np.ndarray:
    """Original indices whose representative is in the visible set (sorted)."""
    idx = np.asarray(visible_downsampled_indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= mapping.n_representatives):
        raise IndexError(
            f"representative index out of range [0, {mapping.n_representatives})")
    rep_visible = np.zeros(mapping.n_representatives, dtype=bool)
    rep_visible[idx] = True
    return np.flatnonzero(rep_visible[mapping.inverse])


# ---------------------------------------------------------------------------
# trajectories

TRAJECTORY_COLUMNS = ("frame", "x", "y", "z", "yaw", "pitch", "roll")


def load_trajectory_csv(path, angle_unit: str = "radians") -> list:
    if angle_unit not in ("degrees", "radians"):
        raise ValueError(f"angle_unit must be 'degrees' or 'radians', got {angle_unit!r}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        missing = [c for c in TRAJECTORY_COLUMNS if c not in header]
        if missing:
            raise TrajectorySchemaError(f"{path}: missing column(s) {', '.join(missing)}")
        reader.fieldnames = header
        rows = list(reader)
    records = []
    last = None
    for lineno, row in enumerate(rows, start=2):
        frame = int(row["frame"])
        if last is not None and frame <= last:
            raise TrajectoryOrderError(f"{path}:{lineno}: frame {frame} after {last}")
        last = frame
        pos = [float(row[c]) for c in ("x", "y", "z")]
        ang = np.array([float(row[c]) for c in ("yaw", "pitch", "roll")])
        if angle_unit == "degrees":
            ang = np.deg2rad(ang)
        records.append(TrajectoryRecord(frame, Pose6DoF(pos, ang)))
    return records


def write_trajectory_csv(path, records: Iterable[TrajectoryRecord], angle_unit: str = "radians") -> None:
    if angle_unit not in ("degrees", "radians"):
        raise ValueError(f"angle_unit must be 'degrees' or 'radians', got {angle_unit!r}")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        for r in records:
            p = r.pose.as_array()
            if angle_unit == "degrees":
                p[3:] = np.rad2deg(p[3:])
            w.writerow([r.frame_index] + [repr(float(v)) for v in p])


def trajectory_array(records: Sequence[TrajectoryRecord]):
    """Return ``(frame_indices, poses)`` with poses as a ``(T, 6)`` array."""
    frames = np.array([r.frame_index for r in records], dtype=np.int64)
    poses = np.array([r.pose.as_array() for r in records]).reshape(-1, 6)
    return frames, poses


# ---------------------------------------------------------------------------
# synthetic scenes

SYNTH_GENERATORS = ("static-sphere", "translating-box", "orbiting-camera")
TRAJECTORY_KINDS = ("constant", "pan", "orbit", "wander")


def _sphere_surface(rng, n, center, radius):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return np.asarray(center) + radius * v


def _box_surface(rng, n, center, size):
    size = np.asarray(size, dtype=np.float64)
    areas = np.array([size[1] * size[2], size[0] * size[2], size[0] * size[1]])
    face_axis = rng.choice(3, size=n, p=areas / areas.sum())
    pts = rng.uniform(-0.5, 0.5, size=(n, 3))
    pts[np.arange(n), face_axis] = rng.choice([-0.5, 0.5], size=n)
    return np.asarray(center) + pts * size


def synth_body(rng, n, height: float = 1.8, base=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Points on a crude standing figure: stacked ellipsoid surfaces."""
    parts = [  # center (fraction of height), semi-axes (fraction of height), weight
        ((0.0, 0.93, 0.0), (0.06, 0.07, 0.06), 0.06),   # head
        ((0.0, 0.65, 0.0), (0.12, 0.17, 0.07), 0.30),   # torso
        ((-0.16, 0.62, 0.0), (0.035, 0.17, 0.035), 0.08),
        ((0.16, 0.62, 0.0), (0.035, 0.17, 0.035), 0.08),
        ((-0.06, 0.25, 0.0), (0.05, 0.25, 0.05), 0.24),
        ((0.06, 0.25, 0.0), (0.05, 0.25, 0.05), 0.24),
    ]
    weights = np.array([p[2] for p in parts])
    which = rng.choice(len(parts), size=n, p=weights / weights.sum())
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    centers = np.array([p[0] for p in parts])[which] * height
    axes = np.array([p[1] for p in parts])[which] * height
    return np.asarray(base) + centers + v * axes


def synth_trajectory(kind: str, frames: int, centroid, seed: int = 0, **params) -> list:
    """Viewer trajectory generators.

    ``constant`` holds one pose, ``pan`` moves the viewer at constant
    velocity and yaw rate, ``orbit`` circles the centroid looking at it
    and ``wander`` is a smooth, seeded random drift around the centroid.
    """
    centroid = np.asarray(centroid, dtype=np.float64)
    radius = float(params.get("radius", 2.5))
    height = float(params.get("height", centroid[1]))
    records = []
    if kind == "constant":
        pose = look_at(centroid + np.array([0.0, height - centroid[1], -radius]), centroid)
        records = [TrajectoryRecord(t, pose) for t in range(frames)]
    elif kind == "pan":
        start = np.asarray(params.get("start", centroid + np.array([0.0, 0.0, -radius])), float)
        velocity = np.asarray(params.get("velocity", (0.0, 0.0, 0.0)), float)
        base = look_at(start, centroid)
        yaw_rate = float(params.get("yaw_rate", 0.01))
        for t in range(frames):
            records.append(TrajectoryRecord(t, Pose6DoF(
                start + t * velocity,
                [base.yaw + t * yaw_rate, base.pitch, 0.0])))
    elif kind == "orbit":
        period = float(params.get("period", 120))
        phase = float(params.get("phase", 0.0))
        direction = float(params.get("direction", 1.0))
        for t in range(frames):
            a = phase + direction * 2.0 * math.pi * ((t % period) / period)
            pos = centroid + np.array([radius * math.sin(a), height - centroid[1], radius * math.cos(a)])
            records.append(TrajectoryRecord(t, look_at(pos, centroid)))
    elif kind == "wander":
        rng = np.random.default_rng(seed)
        n_terms = 3
        amp = rng.uniform(0.2, 1.0, size=(4, n_terms)) / n_terms
        freq = rng.uniform(0.002, 0.02, size=(4, n_terms))
        ph = rng.uniform(0, 2 * math.pi, size=(4, n_terms))
        base_angle = rng.uniform(-math.pi, math.pi)
        t = np.arange(frames)[:, None, None]
        waves = (amp * np.sin(2 * math.pi * freq * t + ph)).sum(-1)  # (T, 4)
        for i in range(frames):
            a = base_angle + 2.5 * waves[i, 0]
            r = radius * (1.0 + 0.3 * waves[i, 1])
            pos = centroid + np.array([r * math.sin(a), height - centroid[1] + 0.3 * waves[i, 2],
                                       r * math.cos(a)])
            gaze = centroid + np.array([0.6 * waves[i, 3], 0.4 * waves[i, 2], 0.0])
            records.append(TrajectoryRecord(i, look_at(pos, gaze)))
    else:
        raise SynthConfigError(f"unknown trajectory kind {kind!r}; expected one of {TRAJECTORY_KINDS}")
    return records


_DEFAULT_TRAJECTORY = {
    "static-sphere": "constant",
    "translating-box": "pan",
    "orbiting-camera": "orbit",
}


_TRAJECTORY_PARAM_KEYS = {
    "camera_radius": "radius",
    "camera_height": "height",
    "camera_start": "start",
    "camera_velocity": "velocity",
    "yaw_rate": "yaw_rate",
    "period": "period",
    "phase": "phase",
    "direction": "direction",
}


def synth_scene(scene: dict):
    """Build a deterministic synthetic scene and one viewer trajectory.

    ``scene`` is ``{"generator", "seed", "frames", "points", "params"}`` where
    ``params`` holds generator keys (``radius``, ``center``, ``size``,
    ``velocity``, ``body_height``) and viewer keys (``trajectory``,
    ``camera_radius``, ``camera_height``, ``period``, ``trajectory_seed``, ...).
    Scenes that differ only in viewer keys share the same point cloud.
    """
    generator = scene.get("generator")
    if generator not in SYNTH_GENERATORS:
        raise SynthConfigError(f"unknown generator {generator!r}; expected one of {SYNTH_GENERATORS}")
    seed = int(scene.get("seed", 0))
    n_frames = int(scene.get("frames", 30))
    n_points = int(scene.get("points", 2000))
    params = dict(scene.get("params", {}))
    if n_frames < 1 or n_points < 0:
        raise SynthConfigError("frames must be >= 1 and points >= 0")
    fps = float(scene.get("fps", 30.0))
    rng = np.random.default_rng(seed)

    if generator == "static-sphere":
        center = np.asarray(params.pop("center", (0.0, 0.9, 0.0)), float)
        base = _sphere_surface(rng, n_points, center, float(params.pop("radius", 0.5)))
        velocity = np.zeros(3)
    elif generator == "translating-box":
        center = np.asarray(params.pop("center", (0.0, 0.9, 0.0)), float)
        base = _box_surface(rng, n_points, center, params.pop("size", (0.4, 1.8, 0.3)))
        velocity = np.asarray(params.pop("velocity", (0.005, 0.0, 0.0)), float)
    else:
        base = synth_body(rng, n_points, float(params.pop("body_height", 1.8)))
        velocity = np.zeros(3)
    colors = rng.integers(0, 256, size=(n_points, 3), dtype=np.uint8)
    frames = tuple(PointCloudFrame(t, base + t * velocity, colors) for t in range(n_frames))
    seq = FrameSequence(frames, fps)

    kind = params.pop("trajectory", _DEFAULT_TRAJECTORY[generator])
    traj_seed = int(params.pop("trajectory_seed", seed + 1))
    traj_params = {}
    for key, name in _TRAJECTORY_PARAM_KEYS.items():
        if key in params:
            traj_params[name] = params.pop(key)
    if params:
        raise SynthConfigError(f"unknown params for {generator}: {sorted(params)}")
    centroid = base.mean(axis=0) if n_points else np.zeros(3)
    traj = synth_trajectory(kind, n_frames, centroid, seed=traj_seed, **traj_params)
    return seq, traj
