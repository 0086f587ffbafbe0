import math

import numpy as np
import pytest

from cellvis.autograd import GRUCell, Tensor, gradient_check, mse_loss, tensor
from cellvis.autograd.tensor import ShapeError
from cellvis.cellgrid import build_graph
from cellvis.model import (
    CellVisibilityPredictor, GraphAttention, MissingOccupancyError, ModelConfig,
    SpatioTemporalNet, bidirectional_rollout, gru_step, occupancy_mask,
)
from oracles import attention_by_hand

PATH3 = (np.array([[0, 1, 0], [1, 0, 2], [2, 1, 2]]),
         np.array([[True, True, False], [True, True, True], [True, True, False]]))


def _set(p: Tensor, value):
    p.data = np.broadcast_to(np.asarray(value, dtype=np.float64), p.shape).copy()


def test_three_node_attention_by_hand():
    rng = np.random.default_rng(0)
    att = GraphAttention(2, 2, 1, rng)
    Wq, Wk, Wv = [np.array(m, dtype=float) for m in
                  ([[0.5, -1.0], [0.25, 2.0]], [[1.0, 0.5], [-0.5, 1.5]], [[2.0, 0.0], [1.0, -1.0]])]
    bq, bk, bv = np.array([0.1, -0.2]), np.array([0.0, 0.3]), np.array([-0.5, 0.25])
    for p, v in ((att.w_q, Wq.T), (att.w_k, Wk.T), (att.w_v, Wv.T),
                 (att.b_q, bq), (att.b_k, bk), (att.b_v, bv), (att.w_o, np.eye(2)), (att.b_o, 0)):
        _set(p, v)
    H = np.array([[1.0, 0.0], [0.5, -1.0], [-0.25, 2.0]])
    got = att(tensor(H[None]), *PATH3).numpy()[0]
    ref = attention_by_hand(H, [[0, 1], [1, 0, 2], [2, 1]], Wq, bq, Wk, bk, Wv, bv)
    np.testing.assert_allclose(got, ref, rtol=0, atol=1e-12)


def test_identical_neighbours_give_uniform_weights(rng):
    att = GraphAttention(5, 4, 2, rng)
    g = build_graph((3, 2, 2), 26)
    idx, mask = g.neighbor_table()
    H = np.tile(rng.normal(size=5), (1, 12, 1))
    alpha, _ = att.attention(tensor(H), idx, mask)
    a = alpha.numpy()
    expected = mask / mask.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(a, np.broadcast_to(expected, a.shape), atol=1e-15)
    out = att(tensor(H), idx, mask).numpy()
    np.testing.assert_allclose(out, np.broadcast_to(out[:, :1], out.shape), atol=1e-14)


def test_attention_rows_sum_to_one(rng):
    g = build_graph((3, 2, 2), 26)
    idx, mask = g.neighbor_table()
    for mode in ("softmax", "raw-ratio"):
        att = GraphAttention(6, 4, 2, rng, mode)
        a = att.attention(tensor(rng.normal(size=(3, 12, 6))), idx, mask)[0].numpy()
        assert np.abs(a.sum(-1) - 1).max() < 1e-6
        assert np.all(a[..., ~mask] == 0)


def test_attention_shape_errors(rng):
    att = GraphAttention(6, 4, 2, rng)
    idx, mask = build_graph((2, 2, 2), 6).neighbor_table()
    with pytest.raises(ShapeError):
        att(tensor(np.zeros((1, 8, 5))), idx, mask)
    with pytest.raises(ShapeError):
        att(tensor(np.zeros((1, 7, 6))), idx, mask)


def test_permutation_equivariance_exact(rng):
    g = build_graph((3, 2, 2), 26)
    perm = rng.permutation(12)
    gp = g.relabeled(perm)
    inv = np.argsort(perm)
    att = GraphAttention(6, 4, 2, rng)
    H = rng.normal(size=(2, 12, 6))
    a = att(tensor(H), *g.neighbor_table()).numpy()
    b = att(tensor(H[:, inv]), *gp.neighbor_table()).numpy()
    np.testing.assert_array_equal(b, a[:, inv])


def test_gru_zero_weights():
    cell = GRUCell(3, 4, np.random.default_rng(0))
    for p in cell.parameters():
        _set(p, 0)
    h = np.array([[0.5, -1.0, 2.0, 0.25]])
    out = gru_step(cell, tensor(np.ones((1, 3))), tensor(h)).numpy()
    np.testing.assert_allclose(out, 0.5 * h, atol=1e-15)


def test_gru_saturated_update_gate_gives_candidate(rng):
    cell = GRUCell(3, 4, rng)
    b = cell.b_ih.data.copy()
    b[4:8] = 50.0
    _set(cell.b_ih, b)
    x, h = rng.normal(size=(2, 3)), rng.normal(size=(2, 4))
    out = cell(tensor(x), tensor(h)).numpy()
    gi, gh = x @ cell.w_ih.data + cell.b_ih.data, h @ cell.w_hh.data + cell.b_hh.data
    r = 1 / (1 + np.exp(-(gi[:, :4] + gh[:, :4])))
    n = np.tanh(gi[:, 8:] + r * gh[:, 8:])
    np.testing.assert_allclose(out, n, atol=1e-12)


def test_gru_per_cell_independence(rng):
    cell = GRUCell(3, 4, rng)
    x = np.tile(rng.normal(size=3), (5, 1))
    h = np.tile(rng.normal(size=4), (5, 1))
    out = cell(tensor(x), tensor(h)).numpy()
    assert np.all(out == out[0])


def _net(rng, **kw):
    cfg = ModelConfig(**{"hidden_dim": 4, "heads": 2, "history": 3, **kw})
    return SpatioTemporalNet(cfg, rng)


def test_rollout_single_frame_and_empty_history(rng):
    net = _net(rng, history=1)
    g = build_graph((2, 2, 2), 6)
    s, sr = bidirectional_rollout(net, rng.normal(size=(2, 1, 8, 7)), g)
    assert s.shape == sr.shape == (2, 8, 4)
    assert not np.allclose(s.numpy(), sr.numpy())
    with pytest.raises(ValueError):
        net.rollout(tensor(np.zeros((2, 0, 8, 7))), g)
    with pytest.raises(ShapeError):
        net.rollout(tensor(np.zeros((2, 3, 8, 6))), g)


def test_directions_are_independent_and_order_sensitive(rng):
    net = _net(rng)
    g = build_graph((2, 2, 2), 6)
    G = rng.normal(size=(1, 3, 8, 7))
    s, sr = net.rollout(tensor(G), g)
    s2, sr2 = net.rollout(tensor(G[:, ::-1].copy()), g)
    assert not np.allclose(s.numpy(), s2.numpy())
    assert not np.allclose(sr.numpy(), sr2.numpy())


def test_masking_and_zero_head(rng):
    net = _net(rng)
    g = build_graph((2, 2, 2), 6)
    G = tensor(rng.normal(size=(4, 3, 8, 7)))
    occ = rng.integers(0, 3, size=(4, 8))
    m = occupancy_mask(occ)
    pred = net(G, g, m).numpy()
    assert np.all(pred[occ == 0] == 0) and np.all(pred[occ > 0] > 0)
    last = net.head.layers[-1]
    _set(last.weight, 0)
    _set(last.bias, 0)
    np.testing.assert_array_equal(net(G, g, m).numpy(), 0.5 * m)
    with pytest.raises(MissingOccupancyError):
        net(G, g, None)


def test_raw_ratio_attention_gradcheck(rng):
    # the ratio has poles where a neighbourhood's scores sum to 0, so the
    # check runs on one layer whose denominators stay well away from 0
    att = GraphAttention(11, 4, 2, rng, "raw-ratio")
    idx, mask = build_graph((2, 2, 2), 6).neighbor_table()
    H = tensor(rng.normal(size=(2, 8, 11)))
    w = tensor(rng.normal(size=(2, 8, 4)))
    rep = gradient_check(att, lambda: (att(H, idx, mask) * w).sum())
    assert rep.passed, rep.failures()


def _windows(rng, n=6, h=3, cells=8):
    X = rng.uniform(size=(n, h, cells, 7))
    occ = (rng.uniform(size=(n, cells)) > 0.2).astype(float)
    y = rng.uniform(size=(n, cells)) * occ
    return X, y, occ


def test_predictor_fit_deterministic_and_roundtrip(tmp_path, rng):
    X, y, occ = _windows(rng)
    kw = dict(hidden_dim=4, heads=2, history=3, dims=(2, 2, 2), epochs=3, batch_size=4, seed=3)
    a = CellVisibilityPredictor(**kw).fit(X, y, occ)
    b = CellVisibilityPredictor(**kw).fit(X, y, occ)
    np.testing.assert_array_equal(a.loss_curve_, b.loss_curve_)
    pa = a.predict(X, occ)
    np.testing.assert_array_equal(pa, b.predict(X, occ))
    assert np.all(pa[occ == 0] == 0)
    a.save(tmp_path / "m.ckpt", {"horizon": 10})
    c = CellVisibilityPredictor.load(tmp_path / "m.ckpt")
    np.testing.assert_array_equal(c.predict(X, occ), pa)
    assert c.checkpoint_meta_["horizon"] == 10
    a.write_loss_curve(tmp_path / "loss.csv")
    assert (tmp_path / "loss.csv").read_text().splitlines()[0] == "epoch,train_mse,val_mse"
    with pytest.raises(MissingOccupancyError):
        a.predict(X)


def test_early_stopping_restores_best(rng):
    X, y, occ = _windows(rng, n=8)
    Xv, yv, ov = _windows(np.random.default_rng(77), n=4)
    est = CellVisibilityPredictor(hidden_dim=4, heads=2, history=3, dims=(2, 2, 2), epochs=40,
                                  patience=2, lr=5e-2, batch_size=2, seed=0, dtype="float64")
    est.fit(X, y, occ, eval_set=(Xv, yv, ov))
    vals = [v for _, _, v in est.loss_curve_]
    assert est.stopped_epoch_ is not None and len(vals) < 40
    assert est._eval_mse(est._scale(Xv), ov, yv) == pytest.approx(min(vals), rel=1e-12)


def test_predictor_input_errors(rng):
    X, y, occ = _windows(rng)
    est = CellVisibilityPredictor(hidden_dim=4, heads=2, history=3, dims=(2, 2, 2), epochs=1)
    with pytest.raises(ValueError):
        est.fit(X[:, :2], y, occ)
    with pytest.raises(ValueError):
        est.fit(X[:0], y[:0], occ[:0])
    with pytest.raises(ValueError):
        CellVisibilityPredictor(hidden_dim=5, heads=2).config()
    assert math.isfinite(est.fit(X, y, occ).score(X, y, occ))
