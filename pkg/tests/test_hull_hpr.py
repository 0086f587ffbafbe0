import time

import numpy as np
import pytest
from scipy.spatial import ConvexHull

from cellvis.camera import CameraIntrinsics, Pose6DoF, look_at
from cellvis.hpr import HprParameterError, HprParams, hpr_visible, spherical_flip, zbuffer_oracle
from cellvis.hull import convex_hull_3d, hull_facets
from oracles import brute_force_hull


def sphere(n, radius, seed):
    p = np.random.default_rng(seed).normal(size=(n, 3))
    return radius * p / np.linalg.norm(p, axis=1, keepdims=True)


def test_flip_examples():
    np.testing.assert_allclose(spherical_flip([[1, 0, 0]], [0, 0, 0], 3.0), [[5, 0, 0]])
    q = np.array([[0.0, 3.0, 0.0]])
    np.testing.assert_allclose(spherical_flip(q, [0, 0, 0], 3.0), q)
    with pytest.raises(HprParameterError):
        spherical_flip([[4, 0, 0]], [0, 0, 0], 3.0)
    with pytest.raises(HprParameterError):
        HprParams(gamma=0)


def test_flip_reverses_distance_order(rng):
    p = rng.normal(size=(100, 3))
    d = np.linalg.norm(p, axis=1)
    fd = np.linalg.norm(spherical_flip(p, [0, 0, 0], 10 * d.max()), axis=1)
    np.testing.assert_array_equal(np.argsort(d), np.argsort(-fd))


def test_hull_small_cases(rng):
    cube = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], float)
    assert convex_hull_3d(np.vstack([cube, [[0.5, 0.5, 0.5]]])).tolist() == list(range(8))
    tet = rng.normal(size=(4, 3))
    assert convex_hull_3d(tet).tolist() == [0, 1, 2, 3]
    assert convex_hull_3d(rng.normal(size=(3, 3))).tolist() == [0, 1, 2]
    assert convex_hull_3d(np.zeros((0, 3))).size == 0


def test_hull_degenerate_inputs(rng):
    t = np.linspace(0, 1, 7)
    line = np.column_stack([t, 2 * t, -t])[rng.permutation(7)]
    got = convex_hull_3d(line)
    assert sorted(line[got, 0].tolist()) == [0.0, 1.0]
    sq = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0.5, 0.5, 0], [0.2, 0.7, 0]], float)
    assert convex_hull_3d(sq).tolist() == [0, 1, 2, 3]
    assert hull_facets(sq) is None


def test_hull_ball_matches_brute_force_on_subsample(rng):
    ball = rng.normal(size=(1000, 3)) * rng.uniform(0, 1, (1000, 1)) ** (1 / 3)
    sub = ball[rng.choice(1000, 50, replace=False)]
    assert convex_hull_3d(sub).tolist() == brute_force_hull(sub).tolist()
    assert convex_hull_3d(ball).tolist() == np.sort(ConvexHull(ball).vertices).tolist()


def test_hull_facets_enclose_points(rng):
    pts = rng.normal(size=(300, 3))
    f = hull_facets(pts)
    a, b, c = pts[f[:, 0]], pts[f[:, 1]], pts[f[:, 2]]
    n = np.cross(b - a, c - a)
    side = n @ pts.T - np.einsum("ij,ij->i", n, a)[:, None]
    assert side.max() <= 1e-9
    # closed triangulated surface: V - E + F = 2
    edges = {tuple(sorted(e)) for t in f for e in ((t[0], t[1]), (t[1], t[2]), (t[0], t[2]))}
    assert len(np.unique(f)) - len(edges) + len(f) == 2


def test_hpr_trivial_cases():
    assert hpr_visible(np.zeros((0, 3)), [0, 0, 0]).visible_indices.size == 0
    assert hpr_visible([[1.0, 2.0, 3.0]], [0, 0, 0]).visible_indices.tolist() == [0]


def test_hpr_sphere_front_hemisphere_and_oracle_agreement():
    p = sphere(2000, 0.5, 7)
    eye = np.array([0.0, 0.0, -20.0])
    vis = hpr_visible(p, eye).mask(len(p))
    ref = zbuffer_oracle(p, look_at(eye, [0, 0, 0])).mask(len(p))
    facing = p[vis] @ (eye / np.linalg.norm(eye)) / 0.5
    # silhouette band only; nothing from the far side
    assert facing.min() > -0.1
    assert (vis == ref).mean() >= 0.95


def test_hpr_backends_agree():
    p = sphere(3000, 1.0, 3)
    a = hpr_visible(p, [0, 0, 4.0], hull="quickhull").visible_indices
    b = hpr_visible(p, [0, 0, 4.0], hull="qhull").visible_indices
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        hpr_visible(p, [0, 0, 4.0], hull="gift-wrap")


def test_occluding_disk_hides_far_point():
    g = np.arange(-0.2, 0.2001, 0.004)
    X, Y = np.meshgrid(g, g)
    m = X ** 2 + Y ** 2 <= 0.04
    disk = np.column_stack([X[m], Y[m], np.ones(m.sum())])
    pts = np.vstack([disk, [[0, 0, 1.0], [0, 0, 2.0]]])
    ref = zbuffer_oracle(pts, Pose6DoF([0, 0, 0], [0, 0, 0])).mask(len(pts))
    assert ref[-2] and not ref[-1]
    assert not hpr_visible(pts, [0, 0, 0]).mask(len(pts))[-1]


def test_zbuffer_examples():
    pose = Pose6DoF([0, 0, 0], [0, 0, 0])
    assert zbuffer_oracle([[0, 0, 2.0]], pose).visible_indices.tolist() == [0]
    assert zbuffer_oracle([[0, 0, 1.0], [0, 0, 2.0]], pose).visible_indices.tolist() == [0]
    assert zbuffer_oracle([[0, 0, -1.0], [0, 0, 80.0]], pose).visible_indices.size == 0
    with pytest.raises(ValueError):
        zbuffer_oracle([[0, 0, 1.0]], pose, splat_px=0)


def test_hpr_runtime_small():
    p = sphere(2000, 0.5, 7)
    t = time.perf_counter()
    hpr_visible(p, [0, 0, -20.0])
    assert time.perf_counter() - t < 2.0
    assert CameraIntrinsics().fx == 525.0
