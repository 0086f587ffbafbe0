"""Pinhole camera model for 6DoF viewers.

Conventions used throughout the package:

* orientation is ``(yaw, pitch, roll)`` in radians, canonical in ``[-pi, pi)``;
* ``R = Rz(roll) @ Ry(yaw) @ Rx(pitch)`` maps camera axes to world axes;
* the camera looks along ``+z`` in camera space, image ``u`` grows with
  camera ``x`` and ``v`` grows with camera ``y``;
* world -> camera is ``p_cam = R.T @ (p_world - position)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Pose6DoF",
    "CameraIntrinsics",
    "Projection",
    "DegenerateEncodingError",
    "wrap_angle",
    "rotation_matrix",
    "rotation_matrices",
    "extrinsic_matrix",
    "world_to_camera",
    "project",
    "in_frustum",
    "encode_angles",
    "decode_angles",
    "encode_poses",
    "decode_poses",
    "look_at",
]


class DegenerateEncodingError(ValueError):
    """A (sin, cos) pair with zero norm cannot be decoded to an angle."""


def wrap_angle(a):
    """Map angles onto ``[-pi, pi)``.

    Values already in range are returned untouched, so wrapping is
    idempotent bit for bit.
    """
    a = np.asarray(a, dtype=np.float64)
    inside = (a >= -math.pi) & (a < math.pi)
    wrapped = np.mod(a + math.pi, 2.0 * math.pi) - math.pi
    # mod can round up to exactly pi
    wrapped = np.where(wrapped >= math.pi, -math.pi, wrapped)
    out = np.where(inside, a, wrapped)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class Pose6DoF:
    """Viewer position in meters and (yaw, pitch, roll) orientation in radians."""

    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64).reshape(3)
        ori = np.asarray(self.orientation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(ori))):
            raise ValueError(f"pose components must be finite, got {pos}, {ori}")
        ori = np.asarray(wrap_angle(ori))
        pos.setflags(write=False)
        ori.setflags(write=False)
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "orientation", ori)

    @classmethod
    def from_array(cls, values) -> "Pose6DoF":
        v = np.asarray(values, dtype=np.float64).reshape(6)
        return cls(v[:3], v[3:])

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.position, self.orientation])

    @property
    def yaw(self) -> float:
        return float(self.orientation[0])

    @property
    def pitch(self) -> float:
        return float(self.orientation[1])

    @property
    def roll(self) -> float:
        return float(self.orientation[2])

    def __eq__(self, other):
        if not isinstance(other, Pose6DoF):
            return NotImplemented
        return bool(np.array_equal(self.position, other.position)
                    and np.array_equal(self.orientation, other.orientation))

    def __hash__(self):
        return hash((self.position.tobytes(), self.orientation.tobytes()))


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics plus near/far clipping depths (meters)."""

    fx: float = 525.0
    fy: float = 525.0
    cx: float = 1920 / 2
    cy: float = 1080 / 2
    width: int = 1920
    height: int = 1080
    d_near: float = 0.05
    d_far: float = 50.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("image size must be positive")
        if not (0 < self.d_near < self.d_far):
            raise ValueError("need 0 < d_near < d_far")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("fx", "fy", "cx", "cy", "width", "height", "d_near", "d_far")}


def _axis_rotations(yaw, pitch, roll):
    cy_, sy_ = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    one, zero = np.ones_like(cy_), np.zeros_like(cy_)
    rx = np.stack([np.stack([one, zero, zero], -1),
                   np.stack([zero, cp, -sp], -1),
                   np.stack([zero, sp, cp], -1)], -2)
    ry = np.stack([np.stack([cy_, zero, sy_], -1),
                   np.stack([zero, one, zero], -1),
                   np.stack([-sy_, zero, cy_], -1)], -2)
    rz = np.stack([np.stack([cr, -sr, zero], -1),
                   np.stack([sr, cr, zero], -1),
                   np.stack([zero, zero, one], -1)], -2)
    return rx, ry, rz


def rotation_matrices(orientations) -> np.ndarray:
    """Vectorised :func:`rotation_matrix` over an ``(..., 3)`` orientation array."""
    o = np.asarray(orientations, dtype=np.float64)
    rx, ry, rz = _axis_rotations(o[..., 0], o[..., 1], o[..., 2])
    return rz @ ry @ rx


def rotation_matrix(pose: Pose6DoF) -> np.ndarray:
    """Camera-to-world rotation ``Rz(roll) @ Ry(yaw) @ Rx(pitch)``."""
    return rotation_matrices(pose.orientation)


def extrinsic_matrix(pose: Pose6DoF) -> np.ndarray:
    """3x4 world-to-camera matrix ``[R.T | -R.T @ position]``."""
    rt = rotation_matrix(pose).T
    return np.hstack([rt, (-rt @ pose.position)[:, None]])


def world_to_camera(points, pose: Pose6DoF) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    # row-vector form of R.T @ (p - t)
    return (pts - pose.position) @ rotation_matrix(pose)


@dataclass
class Projection:
    """Pixel coordinates and depth; ``uv`` is NaN where ``valid`` is False."""

    uv: np.ndarray
    depth: np.ndarray
    valid: np.ndarray = field(repr=False)


def project(points_cam, intrinsics: CameraIntrinsics) -> Projection:
    p = np.asarray(points_cam, dtype=np.float64).reshape(-1, 3)
    z = p[:, 2]
    valid = z > 0
    uv = np.full((len(p), 2), np.nan)
    zv = z[valid]
    uv[valid, 0] = intrinsics.fx * p[valid, 0] / zv + intrinsics.cx
    uv[valid, 1] = intrinsics.fy * p[valid, 1] / zv + intrinsics.cy
    return Projection(uv=uv, depth=z.copy(), valid=valid)


def in_frustum(points_cam, intrinsics: CameraIntrinsics) -> np.ndarray:
    """``0 <= u < width``, ``0 <= v < height`` and ``d_near < z < d_far``."""
    proj = project(points_cam, intrinsics)
    u, v, z = proj.uv[:, 0], proj.uv[:, 1], proj.depth
    with np.errstate(invalid="ignore"):
        inside = ((u >= 0) & (u < intrinsics.width)
                  & (v >= 0) & (v < intrinsics.height)
                  & (z > intrinsics.d_near) & (z < intrinsics.d_far))
    return inside & proj.valid


def encode_angles(orientation) -> np.ndarray:
    """Return ``(3, 2)`` rows of ``(sin, cos)`` for yaw, pitch and roll.

    Accepts a :class:`Pose6DoF` or a raw ``(..., 3)`` orientation array.
    """
    if isinstance(orientation, Pose6DoF):
        orientation = orientation.orientation
    o = np.asarray(orientation, dtype=np.float64)
    return np.stack([np.sin(o), np.cos(o)], axis=-1)


def decode_angles(encoding) -> np.ndarray:
    """Inverse of :func:`encode_angles` via ``atan2``; pairs need not be unit norm."""
    e = np.asarray(encoding, dtype=np.float64)
    s, c = e[..., 0], e[..., 1]
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(c))):
        raise ValueError("encoded angles must be finite")
    if np.any((s == 0) & (c == 0)):
        raise DegenerateEncodingError("cannot decode a (0, 0) sin/cos pair")
    return wrap_angle(np.arctan2(s, c))


def encode_poses(poses) -> np.ndarray:
    """``(..., 6)`` poses -> ``(..., 9)`` channels ``x, y, z, sin/cos`` per angle."""
    p = np.asarray(poses, dtype=np.float64)
    enc = encode_angles(p[..., 3:6])
    return np.concatenate([p[..., :3], enc.reshape(p.shape[:-1] + (6,))], axis=-1)


def decode_poses(encoded) -> np.ndarray:
    e = np.asarray(encoded, dtype=np.float64)
    angles = decode_angles(e[..., 3:9].reshape(e.shape[:-1] + (3, 2)))
    return np.concatenate([e[..., :3], np.asarray(angles)], axis=-1)


def look_at(position, target, roll: float = 0.0) -> Pose6DoF:
    """Pose at ``position`` whose viewing axis points at ``target``."""
    position = np.asarray(position, dtype=np.float64)
    d = np.asarray(target, dtype=np.float64) - position
    n = np.linalg.norm(d)
    if n == 0:
        raise ValueError("target coincides with position")
    d = d / n
    # viewing axis is (sin(yaw) cos(pitch), -sin(pitch), cos(yaw) cos(pitch))
    pitch = math.asin(float(np.clip(-d[1], -1.0, 1.0)))
    yaw = math.atan2(d[0], d[2])
    return Pose6DoF(position, [yaw, pitch, roll])
