import math

import numpy as np
import pytest

from cellvis.camera import CameraIntrinsics, Pose6DoF, in_frustum, look_at, world_to_camera
from cellvis.cellgrid import (
    CHANNELS, CellFeatureExtractor, CellGrid, assign_cells, axis_neighbors, build_graph,
    build_grid, correlation_analysis, extract_frame_features, lattice_offsets, other_features,
    paired_correlation, viewport_feature, visibility_feature,
)
from cellvis.formats import FormatError, read_fvt, write_fvt
from cellvis.hpr import hpr_visible
from cellvis.pc_io import PointCloudFrame, synth_scene, voxel_downsample

INTR = CameraIntrinsics()


def frame(pts):
    return PointCloudFrame(0, np.asarray(pts, dtype=float))


def test_grid_from_unit_cube(rng):
    pts = rng.uniform(0, 1, (500, 3))
    pts[:8] = [[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)]
    g = build_grid([frame(pts)], (5, 6, 8))
    np.testing.assert_allclose(g.cell_size, [0.2, 1 / 6, 0.125], atol=1e-6)
    assert g.n_cells == 240


def test_grid_single_point_and_empty():
    g = build_grid([frame([[1.0, 2.0, 3.0]])], (2, 2, 2))
    assert np.all(g.cell_size > 0)
    with pytest.raises(ValueError):
        build_grid([frame(np.zeros((0, 3)))])


def test_raster_order_x_fastest():
    g = CellGrid([0, 0, 0], [3, 2, 2], (3, 2, 2))
    c = g.cell_coords()
    assert c[:4].tolist() == [[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]]
    np.testing.assert_array_equal(g.flat_index(c), np.arange(12))
    idx, n_out = g.locate([[2.5, 0.5, 1.5], [9, 9, 9]])
    assert idx.tolist() == [2 + 3 * (0 + 2 * 1), 11] and n_out == 1


def test_occupancy_examples(caplog):
    g = CellGrid([0, 0, 0], [2, 2, 2], (2, 2, 2))
    empty = assign_cells(frame(np.zeros((0, 3))), g)
    assert empty.counts.tolist() == [0] * 8 and empty.occupancy_norm.tolist() == [0] * 8
    one = assign_cells(frame([[0.5, 0.5, 0.5]] * 4), g)
    assert one.occupancy_norm.tolist() == [1.0] + [0.0] * 7
    assign_cells(frame([[5.0, 0.5, 0.5]]), g)
    assert "clamped" in caplog.text


def test_graph_degrees_and_edge_counts():
    g6 = build_graph((5, 6, 8), 6)
    g26 = build_graph((5, 6, 8), 26)
    nx, ny, nz = 5, 6, 8
    assert g6.n_edges == (nx - 1) * ny * nz + nx * (ny - 1) * nz + nx * ny * (nz - 1)
    interior = 1 + 5 * (1 + 6 * 1)
    assert g26.degree()[interior] == 26 and g6.degree()[interior] == 6
    assert g6.degree()[0] == 3 and g26.degree()[0] == 7
    for g in (g6, g26):
        for i, a in enumerate(g.adjacency):
            assert all(i in g.adjacency[j] for j in a)
    with pytest.raises(ValueError):
        build_graph((2, 2, 2), 18)


def test_neighbor_table_self_loop_and_padding():
    idx, mask = build_graph((2, 1, 1), 6).neighbor_table()
    assert idx.tolist() == [[0, 1], [1, 0]] and mask.all()
    idx, mask = build_graph((3, 1, 1), 6).neighbor_table()
    assert idx[0].tolist() == [0, 1, 0] and mask[0].tolist() == [True, True, False]


def test_lattice_offsets():
    o = lattice_offsets(8)
    assert sorted(set(o[:, 0])) == [0.25, 0.75]
    with pytest.raises(ValueError):
        lattice_offsets(10)


def test_viewport_inside_and_behind():
    g = CellGrid([-0.1, -0.1, 4.9], [0.1, 0.1, 5.1], (1, 1, 1))
    assert viewport_feature(g, Pose6DoF([0, 0, 0], [0, 0, 0])).tolist() == [1.0]
    assert viewport_feature(g, Pose6DoF([0, 0, 0], [math.pi, 0, 0])).tolist() == [0.0]


def test_viewport_left_edge_straddle():
    z = 5.0
    x_edge = -INTR.cx * z / INTR.fx
    h = 0.05
    g = CellGrid([x_edge - h, -h, z - h], [x_edge + h, h, z + h], (1, 1, 1))
    f = viewport_feature(g, Pose6DoF([0, 0, 0], [0, 0, 0]), INTR, 64)[0]
    assert abs(f - 0.5) <= 1 / 64 ** (1 / 3)
    f_fine = viewport_feature(g, Pose6DoF([0, 0, 0], [0, 0, 0]), INTR, 27000)[0]
    assert abs(f_fine - 0.5) <= 1 / 30


def _shell_points(n_front, n_back):
    """Points 1 m from the origin; ``n_front`` inside the default frustum."""
    front = [[0.1 * math.cos(a), 0.1 * math.sin(a), 1.0]
             for a in np.linspace(0, 2 * math.pi, n_front, endpoint=False)]
    back = [[0.5 * math.cos(a), 0.5 * math.sin(a), -1.0]
            for a in np.linspace(0, 2 * math.pi, n_back, endpoint=False)]
    p = np.array(front + back)
    return p / np.linalg.norm(p, axis=1, keepdims=True)


def test_visibility_four_of_ten():
    pts = _shell_points(4, 6)
    g = CellGrid([-1.1, -1.1, -1.1], [1.1, 1.1, 1.1], (1, 1, 1))
    v = visibility_feature(frame(pts), g, Pose6DoF([0, 0, 0], [0, 0, 0]), voxel_size=1e-4)
    assert v.values.tolist() == [0.4] and v.visible_counts.tolist() == [4]


def test_visibility_empty_cell_and_all_visible():
    pts = _shell_points(6, 0)
    g = CellGrid([-0.5, -0.5, 0.5], [0.5, 0.5, 1.5], (2, 1, 1))
    v = visibility_feature(frame(pts[pts[:, 0] < 0]), g, Pose6DoF([0, 0, 0], [0, 0, 0]), voxel_size=1e-4)
    assert v.values.tolist() == [1.0, 0.0]
    e = visibility_feature(frame(np.zeros((0, 3))), g, Pose6DoF([0, 0, 0], [0, 0, 0]))
    assert e.values.tolist() == [0.0, 0.0]


def test_other_features():
    g = CellGrid([0, 0, 0], [1, 1, 1], (1, 1, 1))
    aux = other_features(g, Pose6DoF([0, 0, 0], [0, 0, 0]))
    np.testing.assert_allclose(aux, [[0.5, 0.5, 0.5, math.sqrt(3) / 2]], rtol=0, atol=1e-15)
    assert other_features(g, Pose6DoF([0.5, 0.5, 0.5], [0, 0, 0]))[0, 3] == 0.0
    g2 = CellGrid([0, 0, 0], [1, 2, 3], (2, 2, 2))
    p = Pose6DoF([0.3, -1, 2], [0.1, 0.2, 0.3])
    t = np.array([10.0, -3.0, 0.5])
    a = other_features(g2, p)[:, 3]
    b = other_features(g2.translated(t), Pose6DoF(p.position + t, p.orientation))[:, 3]
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_correlation_examples():
    rng = np.random.default_rng(0)
    x = rng.normal(size=200)
    assert paired_correlation(x, x) == pytest.approx(1.0, abs=1e-12)
    assert paired_correlation(x, -x) == pytest.approx(-1.0, abs=1e-12)
    a, b = np.random.default_rng(1).normal(size=10_000), np.random.default_rng(2).normal(size=10_000)
    assert abs(paired_correlation(a, b)) < 0.05
    with pytest.raises(ValueError):
        paired_correlation(x, x[:-1])
    r = correlation_analysis(np.column_stack([x, np.ones(200)]))
    assert r.constant.tolist() == [False, True] and r.matrix[1].tolist() == [0.0, 0.0]


def test_axis_neighbors():
    dims = (5, 6, 8)
    assert axis_neighbors(dims, 0, 0, 5) == [0, 1, 2, 3, 4]
    assert axis_neighbors(dims, 2 + 5 * 3, 1, 3) == [2 + 5 * 2, 2 + 5 * 3, 2 + 5 * 4]


def _synth_frames(n=10, seed=0):
    seq, traj = synth_scene({"generator": "static-sphere", "seed": seed, "frames": n, "points": 1500})
    return list(seq), [r.pose for r in traj]


def test_feature_invariants_random_frames():
    rng = np.random.default_rng(4)
    frames, _ = _synth_frames()
    g = build_grid(frames, (3, 3, 4))
    viewf = []
    for fr in frames:
        c = fr.positions.mean(axis=0)
        d = rng.normal(size=3)
        eye = c + rng.uniform(0.8, 3.0) * d / np.linalg.norm(d)
        pose = look_at(eye, c + rng.normal(scale=0.6, size=3))
        ff = extract_frame_features(fr, g, pose, voxel_size=0.03)
        viewf.append(ff.viewport)
        for ch in (ff.viewport, ff.visibility):
            assert ch.min() >= 0 and ch.max() <= 1
        assert np.all(ff.visibility[ff.occupancy == 0] == 0)
        # independent recount of the visible in-frustum original points
        down, m = voxel_downsample(fr, 0.03)
        vis = hpr_visible(down.positions, pose.position).visible_indices
        vis = vis[in_frustum(world_to_camera(down.positions[vis], pose), INTR)]
        expected = sum(len(m.representative_of[i]) for i in vis)
        prod = ff.visibility * ff.occupancy
        assert np.abs(prod - np.rint(prod)).max() < 1e-9
        assert int(np.rint(prod).sum()) == expected
    # the random views must actually clip some cells
    assert 0 < np.mean([(v > 0) & (v < 1) for v in viewf])


def test_extractor_transform_and_fvt_roundtrip(tmp_path):
    frames, poses = _synth_frames(4)
    ex = CellFeatureExtractor(dims=(2, 2, 2), voxel_size=0.03, samples_per_cell=8).fit(frames)
    X = ex.transform(zip(frames, poses))
    assert X.shape == (4, 8, len(CHANNELS))
    assert list(ex.get_feature_names_out()) == list(CHANNELS)
    X2 = CellFeatureExtractor(dims=(2, 2, 2), voxel_size=0.03, samples_per_cell=8,
                              n_jobs=2).fit(frames).transform(zip(frames, poses))
    np.testing.assert_array_equal(X, X2)
    write_fvt(tmp_path / "a.fvt", X, CHANNELS, {"video": "s"})
    write_fvt(tmp_path / "b.fvt", X, CHANNELS, {"video": "s"})
    assert (tmp_path / "a.fvt").read_bytes() == (tmp_path / "b.fvt").read_bytes()
    back, ch, meta = read_fvt(tmp_path / "a.fvt")
    np.testing.assert_array_equal(back, X.astype(np.float32))
    assert ch == CHANNELS and meta == {"video": "s"}
    (tmp_path / "c.fvt").write_bytes(b"JUNK" + (tmp_path / "a.fvt").read_bytes()[4:])
    with pytest.raises(FormatError):
        read_fvt(tmp_path / "c.fvt")
    with pytest.raises(TypeError):
        ex.transform([frames[0]])


def test_far_pose_looking_away_is_zero():
    frames, _ = _synth_frames(1)
    g = build_grid(frames, (2, 2, 2))
    pose = look_at([100.0, 0, 0], [200.0, 0, 0])
    ff = extract_frame_features(frames[0], g, pose, voxel_size=0.03, samples_per_cell=8)
    assert ff.viewport.max() == 0 and ff.visibility.max() == 0
