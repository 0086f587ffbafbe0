import math

import numpy as np
import pytest
from sklearn.exceptions import NotFittedError

from cellvis.autograd import gradient_check, mse_loss, tensor
from cellvis.baselines import (
    LinearPoseRegressor, MLSTMNet, MLSTMRegressor, MMLPNet, MMLPRegressor, lr_extrapolate,
    lr_predict, monotone_suffix_start, pose_to_features, tlr_extrapolate, tlr_predict,
)
from cellvis.camera import Pose6DoF, decode_poses, look_at, wrap_angle
from cellvis.cellgrid import build_grid, extract_frame_features
from cellvis.pc_io import synth_scene


def test_constant_pose_window():
    p = np.array([0.3, -1.0, 2.0, 0.4, -0.2, 0.1])
    win = np.tile(p, (12, 1))
    for fn in (lr_predict, tlr_predict):
        np.testing.assert_allclose(fn(win, 30).as_array(), p, atol=1e-12)


def test_lr_linear_positions_exact(rng):
    t = np.arange(30.0)
    a, b = rng.normal(size=3), rng.normal(size=3)
    pos = a + np.outer(t, b)
    np.testing.assert_allclose(lr_extrapolate(pos, 10), a + (29 + 10) * b, rtol=0, atol=1e-9)
    win = np.column_stack([pos, np.zeros((30, 3))])
    np.testing.assert_allclose(lr_predict(win, 10).position, a + 39 * b, atol=1e-9)


def test_lr_yaw_through_wrap_has_bounded_error():
    h, horizon, w = 10, 5, 0.05
    yaw = np.asarray(wrap_angle(math.pi - 0.3 + w * np.arange(h)))
    win = np.zeros((h, 6))
    win[:, 3] = yaw
    truth = wrap_angle(math.pi - 0.3 + w * (h - 1 + horizon))
    err = abs(wrap_angle(lr_predict(win, horizon).yaw - truth))
    assert 0 < err < w * horizon


def test_tlr_examples():
    assert monotone_suffix_start([3, 2, 1, 2, 3]) == 2
    assert tlr_extrapolate(np.array([3.0, 2, 1, 2, 3]), 2) == pytest.approx(5.0, abs=1e-9)
    assert monotone_suffix_start([5, 4, 3, 2]) == 0
    assert tlr_extrapolate(np.array([5.0, 4, 3, 2]), 3) == pytest.approx(-1.0, abs=1e-9)
    assert monotone_suffix_start([5, 5, 5, 4]) == 2
    assert tlr_extrapolate(np.array([5.0, 5, 5, 4]), 1) == pytest.approx(3.0, abs=1e-9)
    # flat last step: hold the last value
    assert tlr_extrapolate(np.array([1.0, 2, 2]), 4) == 2.0


def test_linear_regressor_estimator(rng):
    X = rng.normal(size=(4, 12, 6)) * 0.1
    lr = LinearPoseRegressor("LR", history=5, horizon=3).fit()
    out = lr.predict(X)
    assert out.shape == (4, 6)
    np.testing.assert_allclose(out[1], lr_predict(X[1, -5:], 3).as_array(), atol=1e-12)
    with pytest.raises(ValueError):
        LinearPoseRegressor("QR").fit()
    with pytest.raises(NotFittedError):
        LinearPoseRegressor().predict(X)


def test_mmlp_zero_weights_output_bias():
    net = MMLPNet(4, (5, 5), np.random.default_rng(0))
    for name, p in net.named_parameters().items():
        p.data = np.zeros_like(p.data)
    bias = np.array([0.1, 0.2, 0.3, 0.6, 0.8, 0.0, 1.0, 1.0, 0.0])
    net.mlp.layers[-1].bias.data = bias.copy()
    out = net(tensor(np.random.default_rng(1).normal(size=(3, 4, 9)))).numpy()
    np.testing.assert_array_equal(out, np.tile(bias, (3, 1)))
    np.testing.assert_allclose(decode_poses(out[0]), [0.1, 0.2, 0.3, math.atan2(0.6, 0.8), 0, math.pi / 2])


def test_learned_baseline_gradchecks(rng):
    x, y = tensor(rng.normal(size=(3, 4, 9))), tensor(rng.normal(size=(3, 9)))
    for net in (MMLPNet(4, (6, 5), rng), MLSTMNet(5, 2, rng)):
        rep = gradient_check(net, lambda: mse_loss(net(x), y))
        assert rep.passed, rep.failures()


def _pose_windows(rng, n, h):
    base = np.column_stack([rng.normal(size=(n, 3)), rng.uniform(-1, 1, (n, 3))])
    vel = rng.normal(scale=0.01, size=(n, 6))
    t = np.arange(h + 1)
    seq = base[:, None, :] + vel[:, None, :] * t[None, :, None]
    return seq[:, :h], seq[:, h]


def test_mlstm_fits_constant_target(rng, tmp_path):
    X, _ = _pose_windows(rng, 8, 5)
    y = np.tile([0.2, -0.1, 0.5, 0.3, 0.1, -0.2], (8, 1))
    est = MLSTMRegressor(history=5, hidden=6, layers=2, lr=1e-2, epochs=400, batch_size=8,
                         dtype="float64").fit(X, y)
    assert est.loss_curve_[-1][1] < 1e-3 * est.loss_curve_[0][1]
    np.testing.assert_allclose(est.predict(X), y, atol=1e-2)
    est.save(tmp_path / "m.ckpt")
    np.testing.assert_array_equal(MLSTMRegressor.load(tmp_path / "m.ckpt").predict(X), est.predict(X))
    with pytest.raises(ValueError):
        MMLPRegressor.load(tmp_path / "m.ckpt")


def test_mmlp_fit_deterministic_and_errors(rng):
    X, y = _pose_windows(rng, 10, 6)
    kw = dict(history=6, hidden=(8, 8), epochs=5, batch_size=4, seed=2)
    a, b = MMLPRegressor(**kw).fit(X, y), MMLPRegressor(**kw).fit(X, y)
    np.testing.assert_array_equal(a.predict(X), b.predict(X))
    with pytest.raises(NotFittedError):
        MMLPRegressor(history=6).predict(X)
    with pytest.raises(ValueError):
        MMLPRegressor(history=6).fit(X[:0], y[:0])
    with pytest.raises(ValueError):
        MMLPRegressor(history=9).fit(X, y)


@pytest.fixture(scope="module")
def scene():
    seq, traj = synth_scene({"generator": "translating-box", "seed": 5, "frames": 3, "points": 1500})
    frames = list(seq)
    return frames, [r.pose for r in traj], build_grid(frames, (3, 3, 3))


def test_pose_to_features_matches_ground_truth(scene):
    frames, poses, grid = scene
    for fr, pose in zip(frames, poses):
        gt = extract_frame_features(fr, grid, pose, voxel_size=0.03)
        f, v = pose_to_features(pose, fr, grid, voxel_size=0.03)
        assert f.tobytes() == gt.viewport.tobytes()
        assert v.tobytes() == gt.visibility.tobytes()
        f2, _ = pose_to_features(pose.as_array(), fr, grid, voxel_size=0.03)
        assert f2.tobytes() == f.tobytes()


def test_pose_far_away_looking_away(scene):
    frames, _, grid = scene
    f, v = pose_to_features(look_at([0, 0, -200.0], [0, 0, -400.0]), frames[0], grid, voxel_size=0.03)
    assert f.max() == 0 and v.max() == 0


def test_small_yaw_change_concentrates_at_frustum_boundary(scene):
    frames, _, grid = scene
    c = frames[0].positions.mean(axis=0)
    # close enough that the frustum cuts through the content
    pose = look_at(c + [0.0, 0.0, -0.45], c + [0.25, 0.0, 0.0])
    nudged = Pose6DoF(pose.position, pose.orientation + [math.radians(1), 0, 0])
    f0, _ = pose_to_features(pose, frames[0], grid, voxel_size=0.03, samples_per_cell=512)
    f1, _ = pose_to_features(nudged, frames[0], grid, voxel_size=0.03, samples_per_cell=512)
    changed = np.abs(f1 - f0) > 0
    boundary = (f0 > 0) & (f0 < 1) | (f1 > 0) & (f1 < 1)
    assert changed.any()
    assert np.all(boundary[changed])
    assert np.abs(f1 - f0)[~boundary].max(initial=0) == 0
