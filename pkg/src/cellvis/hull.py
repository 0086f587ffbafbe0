"""Incremental 3D quickhull returning hull vertex indices.

Plane tests use ``eps = eps_scale * bbox_diagonal`` so the result does not
depend on the cloud's units. Coplanar inputs fall back to a 2D monotone
chain in the supporting plane, collinear inputs to the two extreme points.
"""
from __future__ import annotations

import numpy as np

__all__ = ["convex_hull_3d", "hull_facets", "DEFAULT_EPS_SCALE"]

DEFAULT_EPS_SCALE = 1e-10


class _Facet:
    __slots__ = ("verts", "normal", "offset", "outside", "outside_d")

    def __init__(self, verts, normal, offset):
        self.verts = verts
        self.normal = normal
        self.offset = offset
        self.outside = None
        self.outside_d = None

    def edges(self):
        a, b, c = self.verts
        return ((a, b), (b, c), (c, a))


def _plane(pts, a, b, c):
    n = np.cross(pts[b] - pts[a], pts[c] - pts[a])
    norm = np.sqrt(n @ n)
    if norm > 0:
        n = n / norm
    return n, float(n @ pts[a])


def _hull_2d(pts, idx, normal, eps):
    """Extreme points of a planar set (strict vertices only)."""
    p = pts[idx]
    u = p[1] - p[0] if len(p) > 1 else np.array([1.0, 0.0, 0.0])
    # pick the longest spread direction for a stable basis
    far = np.argmax(np.linalg.norm(p - p[0], axis=1))
    u = p[far] - p[0]
    nu = np.linalg.norm(u)
    if nu <= eps:
        return idx[:1]
    u = u / nu
    w = np.cross(normal, u)
    xy = np.stack([(p - p[0]) @ u, (p - p[0]) @ w], axis=1)
    order = np.lexsort((xy[:, 1], xy[:, 0]))

    def cross(o, a, b):
        return (xy[a, 0] - xy[o, 0]) * (xy[b, 1] - xy[o, 1]) - (xy[a, 1] - xy[o, 1]) * (xy[b, 0] - xy[o, 0])

    def chain(seq):
        out = []
        for k in seq:
            while len(out) >= 2:
                o, a = out[-2], out[-1]
                span = np.hypot(xy[k, 0] - xy[o, 0], xy[k, 1] - xy[o, 1])
                if cross(o, a, k) <= eps * span:
                    out.pop()
                else:
                    break
            out.append(k)
        return out

    lower = chain(order)
    upper = chain(order[::-1])
    verts = np.unique(np.array(lower[:-1] + upper[:-1], dtype=np.int64))
    if len(verts) == 0:
        verts = np.array([order[0], order[-1]], dtype=np.int64)
    return np.sort(idx[verts])


def _initial_simplex(pts, eps):
    ext = np.concatenate([pts.argmin(axis=0), pts.argmax(axis=0)])
    best, pair = -1.0, (ext[0], ext[1])
    for i in range(len(ext)):
        for j in range(i + 1, len(ext)):
            d = np.sum((pts[ext[i]] - pts[ext[j]]) ** 2)
            if d > best:
                best, pair = d, (ext[i], ext[j])
    a, b = (int(pair[0]), int(pair[1]))
    u = pts[b] - pts[a]
    u = u / np.linalg.norm(u)
    rel = pts - pts[a]
    line_d = np.linalg.norm(np.cross(rel, u), axis=1)
    c = int(np.argmax(line_d))
    if line_d[c] <= eps:
        t = rel @ u
        return "line", np.unique([int(np.argmin(t)), int(np.argmax(t))])
    n, off = _plane(pts, a, b, c)
    sd = pts @ n - off
    d = int(np.argmax(np.abs(sd)))
    if abs(sd[d]) <= eps:
        return "plane", (n,)
    return "simplex", (a, b, c, d)


def hull_facets(points, eps_scale: float = DEFAULT_EPS_SCALE):
    """Triangulated hull as an ``(m, 3)`` index array with outward winding.

    Returns ``None`` for inputs without a 3D hull (fewer than four points,
    collinear or coplanar sets).
    """
    pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if n < 4:
        return None
    diag = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
    if diag == 0:
        return None
    eps = eps_scale * diag
    kind, data = _initial_simplex(pts, eps)
    if kind != "simplex":
        return None
    facets = _quickhull(pts, data, eps)
    return np.array([f.verts for f in facets.values()], dtype=np.int64)


def convex_hull_3d(points, eps_scale: float = DEFAULT_EPS_SCALE) -> np.ndarray:
    """Sorted indices of the input points that are vertices of the convex hull.

    Fewer than four points are all returned. Degenerate (collinear or
    coplanar) inputs return the extreme points of the lower-dimensional
    hull.
    """
    pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if n < 4:
        return np.arange(n, dtype=np.int64)
    diag = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
    if diag == 0:
        return np.array([0], dtype=np.int64)
    eps = eps_scale * diag
    kind, data = _initial_simplex(pts, eps)
    if kind == "line":
        return np.sort(np.asarray(data, dtype=np.int64))
    if kind == "plane":
        return _hull_2d(pts, np.arange(n), data[0], eps)
    facets = _quickhull(pts, data, eps)
    verts = np.fromiter((v for f in facets.values() for v in f.verts), dtype=np.int64)
    return np.unique(verts)


def _quickhull(pts, simplex, eps):
    a, b, c, d = simplex
    interior = pts[[a, b, c, d]].mean(axis=0)
    facets = {}
    edge_map = {}
    next_id = 0

    def add_facet(verts, normal=None, off=None):
        nonlocal next_id
        if normal is None:
            normal, off = _plane(pts, *verts)
        f = _Facet(verts, normal, off)
        fid = next_id
        next_id += 1
        facets[fid] = f
        for e in f.edges():
            edge_map[e] = fid
        return fid

    def add_cone(horizon, eye):
        """Facets ``(u, v, eye)`` for every horizon edge, planes computed in one batch."""
        if not horizon:
            return []
        hz = np.array(horizon, dtype=np.int64)
        p = pts[hz[:, 0]]
        a = pts[hz[:, 1]] - p
        b = pts[eye] - p
        n = np.empty_like(a)
        n[:, 0] = a[:, 1] * b[:, 2] - a[:, 2] * b[:, 1]
        n[:, 1] = a[:, 2] * b[:, 0] - a[:, 0] * b[:, 2]
        n[:, 2] = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
        norm = np.sqrt(np.einsum("ij,ij->i", n, n))
        n = n / np.where(norm > 0, norm, 1.0)[:, None]
        off = np.einsum("ij,ij->i", n, p)
        return [add_facet((u, v, eye), n[k], float(off[k])) for k, (u, v) in enumerate(horizon)]

    for tri in ((a, b, c), (a, b, d), (a, c, d), (b, c, d)):
        normal, off = _plane(pts, *tri)
        if normal @ interior - off > 0:
            tri = (tri[0], tri[2], tri[1])
        add_facet(tri)

    def assign(candidates, fids):
        if len(candidates) == 0 or not fids:
            return []
        normals = np.array([facets[f].normal for f in fids])
        offsets = np.array([facets[f].offset for f in fids])
        dist = pts[candidates] @ normals.T - offsets
        best = np.argmax(dist, axis=1)
        best_d = dist[np.arange(len(candidates)), best]
        keep = best_d > eps
        candidates, best, best_d = candidates[keep], best[keep], best_d[keep]
        live = []
        for k, fid in enumerate(fids):
            sel = best == k
            if sel.any():
                f = facets[fid]
                f.outside = candidates[sel]
                f.outside_d = best_d[sel]
                live.append(fid)
        return live

    others = np.setdiff1d(np.arange(len(pts)), [a, b, c, d])
    pending = assign(others, list(facets))

    while pending:
        fid = pending.pop()
        f = facets.get(fid)
        if f is None or f.outside is None:
            continue
        k = int(np.argmax(f.outside_d))
        eye = int(f.outside[k])
        ex, ey, ez = pts[eye]

        visible = {fid}
        hidden = set()
        stack = [fid]
        while stack:
            g = facets[stack.pop()]
            for (u, v) in g.edges():
                h = edge_map[(v, u)]
                if h in visible or h in hidden:
                    continue
                hn = facets[h].normal
                if ex * hn[0] + ey * hn[1] + ez * hn[2] - facets[h].offset > eps:
                    visible.add(h)
                    stack.append(h)
                else:
                    hidden.add(h)

        horizon = []
        orphans = []
        for g_id in visible:
            g = facets[g_id]
            for (u, v) in g.edges():
                if edge_map[(v, u)] not in visible:
                    horizon.append((u, v))
            if g.outside is not None:
                orphans.append(g.outside)
        for g_id in visible:
            g = facets.pop(g_id)
            for e in g.edges():
                if edge_map.get(e) == g_id:
                    del edge_map[e]

        new_ids = add_cone(horizon, eye)
        cand = np.concatenate(orphans) if orphans else np.zeros(0, dtype=np.int64)
        cand = cand[cand != eye]
        pending.extend(assign(cand, new_ids))
    return facets
