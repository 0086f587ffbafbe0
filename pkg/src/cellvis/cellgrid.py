"""Fixed cell partition of a point cloud video and the per-cell features.

Per frame and viewer pose each cell gets

* occupancy ``o_i`` (point count) and ``o_i / max_j o_j``,
* viewport overlap ``f_i``: fraction of a stratified lattice of virtual
  points inside the camera frustum,
* visibility ``v_i``: fraction of the cell's points that survive hidden
  point removal (on a voxel-downsampled cloud) and the frustum test,
* auxiliary ``e_i``: cell center and its distance to the viewer.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .camera import CameraIntrinsics, Pose6DoF, in_frustum, world_to_camera
from .hpr import HprParams, hpr_visible
from .pc_io import DEFAULT_8I_SCALE, PointCloudFrame, upsample_visibility, voxel_downsample

log = logging.getLogger(__name__)

__all__ = [
    "CHANNELS",
    "CellGrid",
    "GridGraph",
    "CellAssignment",
    "VisibilityFeature",
    "CellFeatureFrame",
    "CorrelationResult",
    "build_grid",
    "build_graph",
    "assign_cells",
    "lattice_offsets",
    "viewport_feature",
    "visibility_feature",
    "other_features",
    "extract_frame_features",
    "correlation_analysis",
    "paired_correlation",
    "axis_neighbors",
    "CellFeatureExtractor",
]

CHANNELS = ("occupancy_norm", "f", "v", "center_x", "center_y", "center_z", "dist")
DEFAULT_DIMS = (5, 6, 8)
# 8 source units of the 10-bit 8i grid, in meters
DEFAULT_VOXEL_SIZE = 8 * DEFAULT_8I_SCALE
BBOX_PAD = 1e-6


@dataclass(frozen=True)
class CellGrid:
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    dims: tuple

    def __post_init__(self):
        lo = np.asarray(self.bbox_min, dtype=np.float64).reshape(3)
        hi = np.asarray(self.bbox_max, dtype=np.float64).reshape(3)
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"dims must be three positive integers, got {self.dims}")
        if not np.all(hi > lo):
            raise ValueError("bbox_max must exceed bbox_min on every axis")
        object.__setattr__(self, "bbox_min", lo)
        object.__setattr__(self, "bbox_max", hi)
        object.__setattr__(self, "dims", dims)

    @property
    def n_cells(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def cell_size(self) -> np.ndarray:
        return (self.bbox_max - self.bbox_min) / np.array(self.dims)

    def cell_coords(self) -> np.ndarray:
        """``(n_cells, 3)`` integer grid coordinates, x fastest."""
        nx, ny, nz = self.dims
        iz, iy, ix = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
        return np.stack([ix.ravel(), iy.ravel(), iz.ravel()], axis=1)

    def flat_index(self, coords) -> np.ndarray:
        c = np.asarray(coords)
        nx, ny, _ = self.dims
        return c[..., 0] + nx * (c[..., 1] + ny * c[..., 2])

    @cached_property
    def centers(self) -> np.ndarray:
        return self.bbox_min + (self.cell_coords() + 0.5) * self.cell_size

    def locate(self, points):
        """Cell index of each point and the number that had to be clamped."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        raw = np.floor((pts - self.bbox_min) / self.cell_size).astype(np.int64)
        hi = np.array(self.dims) - 1
        clamped = np.clip(raw, 0, hi)
        n_out = int(np.any(raw != clamped, axis=1).sum())
        return self.flat_index(clamped), n_out

    def translated(self, offset) -> "CellGrid":
        offset = np.asarray(offset, dtype=np.float64)
        return CellGrid(self.bbox_min + offset, self.bbox_max + offset, self.dims)

    def to_dict(self) -> dict:
        return {"bbox_min": self.bbox_min.tolist(), "bbox_max": self.bbox_max.tolist(),
                "dims": list(self.dims)}

    @classmethod
    def from_dict(cls, d) -> "CellGrid":
        return cls(d["bbox_min"], d["bbox_max"], tuple(d["dims"]))


def build_grid(frames: Iterable[PointCloudFrame], dims=DEFAULT_DIMS) -> CellGrid:
    """Grid over the bounding box of every point of every frame.

    The box is padded by 1e-6 m per side so boundary points fall inside and
    a single point still yields a positive volume.
    """
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    for f in frames:
        if len(f):
            lo = np.minimum(lo, f.positions.min(axis=0))
            hi = np.maximum(hi, f.positions.max(axis=0))
    if not np.all(np.isfinite(lo)):
        raise ValueError("cannot build a grid: every frame is empty")
    return CellGrid(lo - BBOX_PAD, hi + BBOX_PAD, tuple(dims))


@dataclass(frozen=True)
class GridGraph:
    """Cell adjacency; node ids follow the grid's x-fastest raster order."""

    n_nodes: int
    adjacency: tuple
    connectivity: int

    @property
    def n_edges(self) -> int:
        return sum(len(a) for a in self.adjacency) // 2

    def degree(self) -> np.ndarray:
        return np.array([len(a) for a in self.adjacency])

    def neighbor_table(self, self_loops: bool = True):
        """Padded ``(n_nodes, max_deg)`` neighbor ids plus validity mask.

        With ``self_loops`` the node itself is listed first. Padding slots
        repeat the node's own id and are masked out.
        """
        lists = [([i] if self_loops else []) + [int(j) for j in a]
                 for i, a in enumerate(self.adjacency)]
        width = max(1, max(len(x) for x in lists))
        idx = np.empty((self.n_nodes, width), dtype=np.int64)
        mask = np.zeros((self.n_nodes, width), dtype=bool)
        for i, x in enumerate(lists):
            idx[i, :len(x)] = x
            idx[i, len(x):] = i
            mask[i, :len(x)] = True
        return idx, mask

    def relabeled(self, perm) -> "GridGraph":
        """Graph with node ``i`` renamed ``perm[i]``; each list keeps its order."""
        perm = np.asarray(perm)
        inv = np.argsort(perm)
        adj = tuple(np.array([perm[j] for j in self.adjacency[inv[k]]], dtype=np.int64)
                    for k in range(self.n_nodes))
        return GridGraph(self.n_nodes, adj, self.connectivity)


def build_graph(grid_or_dims, connectivity: int = 6) -> GridGraph:
    if connectivity not in (6, 26):
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    dims = grid_or_dims.dims if isinstance(grid_or_dims, CellGrid) else tuple(grid_or_dims)
    nx, ny, nz = dims
    if connectivity == 6:
        offsets = [o for o in np.eye(3, dtype=np.int64)] + [-o for o in np.eye(3, dtype=np.int64)]
    else:
        offsets = [np.array(o) for o in np.ndindex(3, 3, 3) if o != (1, 1, 1)]
        offsets = [o - 1 for o in offsets]
    coords = np.stack(np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij"),
                      axis=-1).reshape(-1, 3)[:, ::-1]
    dims_arr = np.array(dims)
    adjacency = []
    for c in coords:
        nb = []
        for o in offsets:
            q = c + o
            if np.all(q >= 0) and np.all(q < dims_arr):
                nb.append(q[0] + nx * (q[1] + ny * q[2]))
        adjacency.append(np.array(sorted(nb), dtype=np.int64))
    return GridGraph(nx * ny * nz, tuple(adjacency), connectivity)


@dataclass(frozen=True)
class CellAssignment:
    point_cells: np.ndarray
    counts: np.ndarray
    n_clamped: int = 0

    @property
    def occupancy_norm(self) -> np.ndarray:
        top = self.counts.max() if len(self.counts) else 0
        if top == 0:
            return np.zeros(len(self.counts))
        return self.counts / top

    @property
    def members(self) -> list:
        order = np.argsort(self.point_cells, kind="stable")
        bounds = np.searchsorted(self.point_cells[order], np.arange(len(self.counts) + 1))
        return [order[bounds[i]:bounds[i + 1]] for i in range(len(self.counts))]


def assign_cells(frame: PointCloudFrame, grid: CellGrid) -> CellAssignment:
    cells, n_out = grid.locate(frame.positions)
    if n_out:
        log.warning("frame %d: %d point(s) outside the grid clamped to boundary cells",
                    frame.frame_index, n_out)
    counts = np.bincount(cells, minlength=grid.n_cells).astype(np.int64)
    return CellAssignment(cells, counts, n_out)


def lattice_offsets(samples_per_cell: int) -> np.ndarray:
    """Cell-local stratified offsets ``(k + 0.5) / m`` with ``m**3`` samples."""
    m = round(samples_per_cell ** (1.0 / 3.0))
    if m < 1 or m ** 3 != samples_per_cell:
        raise ValueError(f"samples_per_cell must be a perfect cube, got {samples_per_cell}")
    t = (np.arange(m) + 0.5) / m
    gz, gy, gx = np.meshgrid(t, t, t, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


def _lattice_points(grid: CellGrid, samples_per_cell: int) -> np.ndarray:
    offs = lattice_offsets(samples_per_cell)
    corner = grid.bbox_min + grid.cell_coords() * grid.cell_size
    return corner[:, None, :] + offs[None, :, :] * grid.cell_size


def viewport_feature(grid: CellGrid, pose: Pose6DoF, intrinsics: CameraIntrinsics = CameraIntrinsics(),
                     samples_per_cell: int = 64) -> np.ndarray:
    """``f_i = K_i / N_i`` over each cell's virtual sample lattice."""
    samples = _lattice_points(grid, samples_per_cell)
    inside = in_frustum(world_to_camera(samples.reshape(-1, 3), pose), intrinsics)
    return inside.reshape(grid.n_cells, samples_per_cell).mean(axis=1)


@dataclass(frozen=True)
class VisibilityFeature:
    values: np.ndarray
    visible_counts: np.ndarray
    visible_points: np.ndarray = field(repr=False)


def visibility_feature(frame: PointCloudFrame, grid: CellGrid, pose: Pose6DoF,
                       intrinsics: CameraIntrinsics = CameraIntrinsics(),
                       hpr_params: HprParams = HprParams(),
                       voxel_size: float = DEFAULT_VOXEL_SIZE,
                       assignment: CellAssignment | None = None,
                       hull: str = "quickhull") -> VisibilityFeature:
    """Visible in-frustum share of each cell's points.

    downsample -> HPR from the viewer position -> frustum filter ->
    upsample to original points -> per-cell count divided by the cell's
    own point count (empty cells get 0).
    """
    if assignment is None:
        assignment = assign_cells(frame, grid)
    n_cells = grid.n_cells
    if len(frame) == 0:
        z = np.zeros(n_cells)
        return VisibilityFeature(z, np.zeros(n_cells, dtype=np.int64), np.zeros(0, dtype=np.int64))
    down, mapping = voxel_downsample(frame, voxel_size)
    vis = hpr_visible(down.positions, pose.position, hpr_params, hull=hull).visible_indices
    cam = world_to_camera(down.positions[vis], pose)
    vis = vis[in_frustum(cam, intrinsics)]
    visible_points = upsample_visibility(mapping, vis)
    counts = np.bincount(assignment.point_cells[visible_points], minlength=n_cells).astype(np.int64)
    occ = assignment.counts
    values = np.zeros(n_cells)
    np.divide(counts, occ, out=values, where=occ > 0)
    return VisibilityFeature(values, counts, visible_points)


def other_features(grid: CellGrid, pose: Pose6DoF) -> np.ndarray:
    """``(n_cells, 4)``: cell center xyz and its distance to the viewer."""
    c = grid.centers
    d = np.linalg.norm(c - pose.position, axis=1)
    return np.hstack([c, d[:, None]])


@dataclass(frozen=True)
class CellFeatureFrame:
    frame_index: int
    occupancy: np.ndarray
    occupancy_norm: np.ndarray
    viewport: np.ndarray
    visibility: np.ndarray
    visible_counts: np.ndarray
    aux: np.ndarray

    def as_channels(self) -> np.ndarray:
        """``(n_cells, 7)`` array in :data:`CHANNELS` order."""
        return np.column_stack([self.occupancy_norm, self.viewport, self.visibility, self.aux])


def extract_frame_features(frame: PointCloudFrame, grid: CellGrid, pose: Pose6DoF,
                           intrinsics: CameraIntrinsics = CameraIntrinsics(),
                           hpr_params: HprParams = HprParams(),
                           voxel_size: float = DEFAULT_VOXEL_SIZE,
                           samples_per_cell: int = 64,
                           hull: str = "quickhull") -> CellFeatureFrame:
    asg = assign_cells(frame, grid)
    vis = visibility_feature(frame, grid, pose, intrinsics, hpr_params, voxel_size, asg, hull)
    return CellFeatureFrame(
        frame_index=frame.frame_index,
        occupancy=asg.counts,
        occupancy_norm=asg.occupancy_norm,
        viewport=viewport_feature(grid, pose, intrinsics, samples_per_cell),
        visibility=vis.values,
        visible_counts=vis.visible_counts,
        aux=other_features(grid, pose),
    )


@dataclass(frozen=True)
class CorrelationResult:
    matrix: np.ndarray
    constant: np.ndarray
    cell_ids: tuple


def correlation_analysis(feature_series, cell_ids=None) -> CorrelationResult:
    """Pearson correlation over time between cells.

    ``feature_series`` is ``(T, n_cells)``; ``cell_ids`` picks columns (all
    when omitted). Constant series correlate 0 with everything, themselves
    included, and are flagged in ``constant``.
    """
    x = np.asarray(feature_series, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"feature_series must be (T, cells), got shape {x.shape}")
    if x.shape[0] < 2:
        raise ValueError("need at least two time samples")
    ids = tuple(range(x.shape[1])) if cell_ids is None else tuple(int(c) for c in cell_ids)
    x = x[:, list(ids)]
    xc = x - x.mean(axis=0)
    norm = np.sqrt((xc ** 2).sum(axis=0))
    constant = norm == 0
    safe = np.where(constant, 1.0, norm)
    r = (xc.T @ xc) / np.outer(safe, safe)
    r[constant, :] = 0.0
    r[:, constant] = 0.0
    r = np.clip(r, -1.0, 1.0)
    return CorrelationResult(r, constant, ids)


def paired_correlation(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"series lengths differ: {a.shape} vs {b.shape}")
    return float(correlation_analysis(np.column_stack([a, b])).matrix[0, 1])


def axis_neighbors(dims, cell: int, axis: int, count: int = 5) -> list:
    """``count`` consecutive cells along ``axis`` containing ``cell``, centred
    on it where the grid allows."""
    nx, ny, _ = dims
    c = [cell % nx, (cell // nx) % ny, cell // (nx * ny)]
    n = dims[axis]
    count = min(count, n)
    start = int(np.clip(c[axis] - count // 2, 0, n - count))
    out = []
    for k in range(start, start + count):
        q = list(c)
        q[axis] = k
        out.append(q[0] + nx * (q[1] + ny * q[2]))
    return out


class CellFeatureExtractor(TransformerMixin, BaseEstimator):
    """Fit the cell grid on a video, then turn ``(frame, pose)`` pairs into
    ``(T, n_cells, 7)`` feature arrays.

    Parameters mirror the feature operations; ``n_jobs`` parallelises
    over frames without changing the output order.
    """

    def __init__(self, dims=DEFAULT_DIMS, connectivity=6, intrinsics=None, gamma=1.0,
                 voxel_size=DEFAULT_VOXEL_SIZE, samples_per_cell=64, hull="quickhull", n_jobs=1):
        self.dims = dims
        self.connectivity = connectivity
        self.intrinsics = intrinsics
        self.gamma = gamma
        self.voxel_size = voxel_size
        self.samples_per_cell = samples_per_cell
        self.hull = hull
        self.n_jobs = n_jobs

    def fit(self, X, y=None):
        frames = list(X)
        self.grid_ = build_grid(frames, self.dims)
        self.graph_ = build_graph(self.grid_, self.connectivity)
        self.n_features_out_ = len(CHANNELS)
        return self

    def _intrinsics(self):
        return self.intrinsics if self.intrinsics is not None else CameraIntrinsics()

    def transform_frames(self, X) -> list:
        """Like :meth:`transform` but returns the :class:`CellFeatureFrame` objects."""
        check_is_fitted(self, "grid_")
        pairs = list(X)
        for pair in pairs:
            if len(pair) != 2 or not isinstance(pair[1], Pose6DoF):
                raise TypeError("transform expects (PointCloudFrame, Pose6DoF) pairs")
        args = (self._intrinsics(), HprParams(self.gamma), self.voxel_size,
                self.samples_per_cell, self.hull)
        if self.n_jobs == 1 or len(pairs) < 2:
            return [extract_frame_features(f, self.grid_, p, *args) for f, p in pairs]
        return Parallel(n_jobs=self.n_jobs, prefer="threads")(
            delayed(extract_frame_features)(f, self.grid_, p, *args) for f, p in pairs)

    def transform(self, X) -> np.ndarray:
        feats = self.transform_frames(X)
        if not feats:
            return np.zeros((0, self.grid_.n_cells, len(CHANNELS)))
        return np.stack([f.as_channels() for f in feats])

    def get_feature_names_out(self, input_features=None):
        return np.array(CHANNELS, dtype=object)
