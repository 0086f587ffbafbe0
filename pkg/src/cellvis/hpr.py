"""Hidden point removal by spherical flipping, plus a z-buffer reference."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CameraIntrinsics, Pose6DoF, in_frustum, project, world_to_camera
from .hull import convex_hull_3d

__all__ = [
    "HprParameterError",
    "HprParams",
    "VisibilityResult",
    "spherical_flip",
    "hpr_visible",
    "zbuffer_oracle",
    "HULL_BACKENDS",
]

HULL_BACKENDS = ("quickhull", "qhull")
# points closer than this to the viewpoint have no flip direction
_SINGULAR_DIST = 1e-9


class HprParameterError(ValueError):
    pass


@dataclass(frozen=True)
class HprParams:
    """Flip radius is ``10**gamma`` times the largest viewpoint distance."""

    gamma: float = 1.0

    def __post_init__(self):
        if not self.gamma > 0:
            raise HprParameterError("gamma must be positive so the flip sphere encloses the cloud")

    def radius(self, max_distance: float) -> float:
        return float(10.0 ** self.gamma * max_distance)


@dataclass(frozen=True)
class VisibilityResult:
    visible_indices: np.ndarray
    viewpoint: np.ndarray

    def __len__(self):
        return len(self.visible_indices)

    def mask(self, n: int) -> np.ndarray:
        m = np.zeros(n, dtype=bool)
        m[self.visible_indices] = True
        return m


def spherical_flip(points, viewpoint, radius: float) -> np.ndarray:
    """Reflect points through the sphere of ``radius`` centred at ``viewpoint``.

    For ``q = p - viewpoint`` the image is ``q + 2 (R - |q|) q / |q|``
    (returned in world coordinates). Points on the viewpoint stay put.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    vp = np.asarray(viewpoint, dtype=np.float64).reshape(3)
    q = pts - vp
    d = np.linalg.norm(q, axis=1)
    if len(d) and radius < d.max():
        raise HprParameterError(
            f"flip radius {radius} is smaller than the farthest point distance {d.max()}")
    scale = np.ones_like(d)
    ok = d > _SINGULAR_DIST
    scale[ok] = (2.0 * radius - d[ok]) / d[ok]
    return vp + q * scale[:, None]


def _hull_vertices(cloud, backend):
    if backend == "quickhull":
        return convex_hull_3d(cloud)
    if backend == "qhull":
        from scipy.spatial import ConvexHull, QhullError
        try:
            return np.sort(ConvexHull(cloud).vertices)
        except (QhullError, ValueError):
            return convex_hull_3d(cloud)
    raise ValueError(f"unknown hull backend {backend!r}; expected one of {HULL_BACKENDS}")


def hpr_visible(points, viewpoint, params: HprParams = HprParams(),
                hull: str = "quickhull") -> VisibilityResult:
    """Points visible from ``viewpoint``: those whose flipped image is on the hull
    of the flipped cloud together with the viewpoint itself."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    vp = np.asarray(viewpoint, dtype=np.float64).reshape(3)
    if len(pts) == 0:
        return VisibilityResult(np.zeros(0, dtype=np.int64), vp)
    q = pts - vp
    d = np.linalg.norm(q, axis=1)
    near = d <= _SINGULAR_DIST
    far_idx = np.flatnonzero(~near)
    if len(far_idx) == 0:
        return VisibilityResult(np.arange(len(pts), dtype=np.int64), vp)
    radius = params.radius(d.max())
    df = d[far_idx]
    flipped = q[far_idx] * ((2.0 * radius - df) / df)[:, None]
    cloud = np.vstack([flipped, np.zeros((1, 3))])
    hv = _hull_vertices(cloud, hull)
    hv = hv[hv < len(far_idx)]
    visible = np.union1d(far_idx[hv], np.flatnonzero(near))
    return VisibilityResult(visible.astype(np.int64), vp)


def zbuffer_oracle(points, pose: Pose6DoF, intrinsics: CameraIntrinsics = CameraIntrinsics(),
                   splat_px: int = 3, slope_tol: float = 2.0) -> VisibilityResult:
    """Depth-buffer visibility reference.

    Every in-frustum point is rendered as a ``splat_px`` square centred on
    its pixel. A point is visible when its depth is within
    ``slope_tol * splat_px * z / fx`` of the buffer at its own pixel, i.e.
    the depth change a surface inclined at ``atan(slope_tol)`` produces
    across one splat. Needs splats dense enough to close the surface.
    """
    if splat_px < 1:
        raise ValueError("splat_px must be >= 1")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cam = world_to_camera(pts, pose)
    inside = np.flatnonzero(in_frustum(cam, intrinsics))
    if len(inside) == 0:
        return VisibilityResult(np.zeros(0, dtype=np.int64), pose.position.copy())
    proj = project(cam[inside], intrinsics)
    pix = np.floor(proj.uv).astype(np.int64)
    depth = proj.depth
    pad = splat_px
    buf = np.full((intrinsics.height + 2 * pad, intrinsics.width + 2 * pad), np.inf)
    lo = splat_px // 2
    rows, cols = pix[:, 1] + pad, pix[:, 0] + pad
    for dy in range(-lo, splat_px - lo):
        for dx in range(-lo, splat_px - lo):
            np.minimum.at(buf, (rows + dy, cols + dx), depth)
    own = buf[rows, cols]
    tol = slope_tol * splat_px * depth / intrinsics.fx
    visible = np.sort(inside[depth <= own + tol])
    return VisibilityResult(visible, pose.position.copy())
