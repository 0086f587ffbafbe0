"""Reference implementations that share no code with the package."""
from __future__ import annotations

import itertools
import math

import numpy as np


def brute_force_hull(points, eps=1e-12) -> np.ndarray:
    """Vertices of every supporting triangle (all other points on one side).

    O(n^3) triples times O(n) side tests, i.e. O(n^4). Valid for points in
    general position.
    """
    p = np.asarray(points, dtype=np.float64)
    tri = np.array(list(itertools.combinations(range(len(p)), 3)))
    a, b, c = p[tri[:, 0]], p[tri[:, 1]], p[tri[:, 2]]
    n = np.cross(b - a, c - a)
    keep = np.linalg.norm(n, axis=1) > eps
    tri, n, a = tri[keep], n[keep], a[keep]
    side = n @ p.T - np.einsum("ij,ij->i", n, a)[:, None]
    scale = np.abs(side).max(axis=1, keepdims=True)
    tol = eps * np.maximum(scale, 1.0)
    supporting = np.all(side <= tol, axis=1) | np.all(side >= -tol, axis=1)
    return np.unique(tri[supporting])


def voxel_count(points, size) -> int:
    """Occupied voxels via a Python set of integer keys."""
    keys = set()
    for x, y, z in np.asarray(points, dtype=np.float64):
        keys.add((math.floor(x / size), math.floor(y / size), math.floor(z / size)))
    return len(keys)


def rot_x(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=float)


def rot_y(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=float)


def rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=float)


def attention_by_hand(H, neighbors, Wq, bq, Wk, bk, Wv, bv):
    """Single-head softmax attention with explicit loops (column-vector form)."""
    out = []
    d = Wq.shape[0]
    for i, nb in enumerate(neighbors):
        q = Wq @ H[i] + bq
        scores = [float(q @ (Wk @ H[j] + bk)) / math.sqrt(d) for j in nb]
        m = max(scores)
        w = [math.exp(s - m) for s in scores]
        z = sum(w)
        acc = np.zeros(d)
        for wj, j in zip(w, nb):
            acc += (wj / z) * (Wv @ H[j] + bv)
        out.append(acc)
    return np.array(out)
