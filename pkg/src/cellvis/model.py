"""Spatio-temporal cell visibility predictor.

At every observed frame the hidden state is concatenated with the raw cell
features, mixed over the cell graph by multi-head attention and handed to a
GRU as its recurrent state. A forward and a reverse pass run with separate
weights; their terminal states feed a per-cell MLP whose sigmoid output is
masked by the target frame's occupancy.
"""
from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .autograd import (
    MLP, Adam, GRUCell, Module, Tape, Tensor, concat, default_dtype, glorot,
    guard_denominator, mse_loss, sigmoid, softmax, take, tensor,
)
from .autograd.tensor import ShapeError
from .cellgrid import CHANNELS, DEFAULT_DIMS, GridGraph, build_graph
from .formats import read_checkpoint, write_checkpoint

log = logging.getLogger(__name__)

__all__ = [
    "ATTENTION_MODES",
    "TARGETS",
    "MissingOccupancyError",
    "ModelConfig",
    "GraphAttention",
    "SpatioTemporalNet",
    "gru_step",
    "bidirectional_rollout",
    "occupancy_mask",
    "CellVisibilityPredictor",
]

ATTENTION_MODES = ("softmax", "raw-ratio")
TARGETS = ("visibility", "viewport")
CHECKPOINT_KIND = "cellvis-model"


class MissingOccupancyError(RuntimeError):
    """Raised when a prediction is requested without target-frame occupancy."""


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 128
    heads: int = 4
    graph_layers: int = 1
    history: int = 90
    horizon: int = 10
    target: str = "visibility"
    attention: str = "softmax"
    n_features: int = len(CHANNELS)

    def __post_init__(self):
        if self.hidden_dim < 1 or self.heads < 1 or self.hidden_dim % self.heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} must be a positive multiple of heads {self.heads}")
        if self.graph_layers < 1:
            raise ValueError("graph_layers must be >= 1")
        if self.history < 1 or self.horizon < 1:
            raise ValueError("history and horizon must be >= 1")
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}, got {self.target!r}")
        if self.attention not in ATTENTION_MODES:
            raise ValueError(f"attention must be one of {ATTENTION_MODES}, got {self.attention!r}")


def _neighbors(graph):
    if isinstance(graph, GridGraph):
        return graph.neighbor_table(self_loops=True)
    idx, mask = graph
    return np.asarray(idx, dtype=np.int64), np.asarray(mask, dtype=bool)


class GraphAttention(Module):
    """Multi-head attention restricted to each node's neighbours (self included).

    Per head ``q_i = W_q h_i + b_q`` and likewise for keys and values; the
    head outputs ``sum_j a_ij v_j`` are concatenated and projected back to
    ``hidden_dim``.
    """

    def __init__(self, in_dim: int, hidden_dim: int, heads: int, rng: np.random.Generator,
                 mode: str = "softmax"):
        if hidden_dim % heads:
            raise ValueError("hidden_dim must be divisible by heads")
        if mode not in ATTENTION_MODES:
            raise ValueError(f"unknown attention mode {mode!r}")
        self.in_dim = in_dim
        self.heads = heads
        self.head_dim = hidden_dim // heads
        self.mode = mode
        d = self.head_dim
        self.w_q = self.param(glorot(rng, in_dim, d, (heads, in_dim, d)))
        self.b_q = self.param(np.zeros((heads, 1, d)))
        self.w_k = self.param(glorot(rng, in_dim, d, (heads, in_dim, d)))
        self.b_k = self.param(np.zeros((heads, 1, d)))
        self.w_v = self.param(glorot(rng, in_dim, d, (heads, in_dim, d)))
        self.b_v = self.param(np.zeros((heads, 1, d)))
        self.w_o = self.param(glorot(rng, hidden_dim, hidden_dim))
        self.b_o = self.param(np.zeros(hidden_dim))

    def attention(self, H: Tensor, nbr_idx, nbr_mask):
        """Return ``(alpha, values)`` with shapes ``(B, heads, N, M)`` and ``(B, heads, N, M, d)``."""
        if H.ndim != 3 or H.shape[2] != self.in_dim:
            raise ShapeError(f"graph attention expects (batch, cells, {self.in_dim}), got {H.shape}")
        B, N, _ = H.shape
        if nbr_idx.shape[0] != N:
            raise ShapeError(f"graph has {nbr_idx.shape[0]} nodes but input has {N} cells")
        M, d = nbr_idx.shape[1], self.head_dim
        Hh = H.reshape(B, 1, N, self.in_dim)
        q = Hh @ self.w_q + self.b_q
        k = Hh @ self.w_k + self.b_k
        v = Hh @ self.w_v + self.b_v
        flat = nbr_idx.reshape(-1)
        kn = take(k, flat, axis=2).reshape(B, self.heads, N, M, d)
        vn = take(v, flat, axis=2).reshape(B, self.heads, N, M, d)
        scores = (q.reshape(B, self.heads, N, 1, d) * kn).sum(axis=-1)
        if self.mode == "softmax":
            alpha = softmax(scores * (1.0 / np.sqrt(d)), axis=-1, mask=nbr_mask)
        else:
            s = scores * nbr_mask.astype(scores.dtype)
            alpha = s / guard_denominator(s.sum(axis=-1, keepdims=True), 1e-8)
        return alpha, vn

    def forward(self, H: Tensor, nbr_idx, nbr_mask) -> Tensor:
        B, N, _ = H.shape
        alpha, vn = self.attention(H, nbr_idx, nbr_mask)
        M = nbr_idx.shape[1]
        out = (alpha.reshape(B, self.heads, N, M, 1) * vn).sum(axis=-2)
        out = out.transpose(0, 2, 1, 3).reshape(B, N, self.heads * self.head_dim)
        return out @ self.w_o + self.b_o


def gru_step(cell: GRUCell, g_t: Tensor, h_hat: Tensor) -> Tensor:
    """One recurrent step: raw features ``g_t`` as input, graph-mixed ``h_hat`` as state."""
    return cell(g_t, h_hat)


class _Direction(Module):
    def __init__(self, cfg: ModelConfig, rng):
        dims = [cfg.hidden_dim + cfg.n_features] + [cfg.hidden_dim] * (cfg.graph_layers - 1)
        self.graph = [GraphAttention(d, cfg.hidden_dim, cfg.heads, rng, cfg.attention) for d in dims]
        self.gru = GRUCell(cfg.n_features, cfg.hidden_dim, rng)

    def step(self, s: Tensor, g: Tensor, nbr_idx, nbr_mask) -> Tensor:
        h = concat([s, g], axis=-1)
        for layer in self.graph:
            h = layer(h, nbr_idx, nbr_mask)
        return gru_step(self.gru, g, h)


class SpatioTemporalNet(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.forward_dir = _Direction(cfg, rng)
        self.reverse_dir = _Direction(cfg, rng)
        k = cfg.hidden_dim
        self.head = MLP([2 * k, k, k, 1], rng)

    def rollout(self, G: Tensor, graph):
        """``(S_{h+1}, S'_0)`` for features ``G`` of shape ``(B, h, N, C)``."""
        if G.ndim != 4 or G.shape[3] != self.cfg.n_features:
            raise ShapeError(f"expected features (batch, h, cells, {self.cfg.n_features}), got {G.shape}")
        B, h, N, _ = G.shape
        if h == 0:
            raise ValueError("history must contain at least one frame")
        nbr_idx, nbr_mask = _neighbors(graph)
        frames = [G[:, t] for t in range(h)]
        zero = tensor(np.zeros((B, N, self.cfg.hidden_dim)))
        s = zero
        for g in frames:
            s = self.forward_dir.step(s, g, nbr_idx, nbr_mask)
        sr = zero
        for g in reversed(frames):
            sr = self.reverse_dir.step(sr, g, nbr_idx, nbr_mask)
        return s, sr

    def logits(self, G: Tensor, graph) -> Tensor:
        s, sr = self.rollout(G, graph)
        z = self.head(concat([s, sr], axis=-1))
        return z.reshape(z.shape[:-1])

    def forward(self, G: Tensor, graph, mask) -> Tensor:
        z = sigmoid(self.logits(G, graph))
        if mask is None:
            raise MissingOccupancyError("target-frame occupancy is required to mask predictions")
        m = np.asarray(mask)
        if m.shape != z.shape:
            raise ShapeError(f"mask shape {m.shape} does not match prediction shape {z.shape}")
        return z * m.astype(z.dtype)


def bidirectional_rollout(net: SpatioTemporalNet, G, graph):
    return net.rollout(G if isinstance(G, Tensor) else tensor(G), graph)


def occupancy_mask(occupancy) -> np.ndarray:
    """``m_i = 1`` where the cell holds at least one point."""
    return (np.asarray(occupancy) > 0).astype(np.float64)


class CellVisibilityPredictor(RegressorMixin, BaseEstimator):
    """Estimator wrapper around :class:`SpatioTemporalNet`.

    ``X`` is a ``(windows, h, cells, 7)`` feature history, ``y`` the target
    channel at frame ``h + f`` and ``occupancy`` that frame's per-cell
    occupancy (counts or normalised; only ``> 0`` matters).
    """

    def __init__(self, hidden_dim=128, heads=4, graph_layers=1, history=90, horizon=10,
                 target="visibility", attention="softmax", dims=DEFAULT_DIMS, connectivity=6,
                 lr=3e-4, batch_size=32, epochs=30, patience=5, seed=0, dtype="float32",
                 standardize=True, verbose=0):
        self.hidden_dim = hidden_dim
        self.heads = heads
        self.graph_layers = graph_layers
        self.history = history
        self.horizon = horizon
        self.target = target
        self.attention = attention
        self.dims = dims
        self.connectivity = connectivity
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.patience = patience
        self.seed = seed
        self.dtype = dtype
        self.standardize = standardize
        self.verbose = verbose

    # -- helpers -------------------------------------------------------
    def config(self) -> ModelConfig:
        return ModelConfig(self.hidden_dim, self.heads, self.graph_layers, self.history,
                           self.horizon, self.target, self.attention)

    def _np_dtype(self):
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        return np.dtype(self.dtype)

    def _check_inputs(self, X, occupancy, y=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 4 or X.shape[3] != len(CHANNELS):
            raise ValueError(f"X must be (windows, h, cells, {len(CHANNELS)}), got {X.shape}")
        if X.shape[1] != self.history:
            raise ValueError(f"X holds {X.shape[1]} history frames, model expects {self.history}")
        if X.shape[2] != self.graph_.n_nodes:
            raise ValueError(f"X has {X.shape[2]} cells, grid graph has {self.graph_.n_nodes}")
        if occupancy is None:
            raise MissingOccupancyError("target-frame occupancy is required")
        occ = np.asarray(occupancy, dtype=np.float64)
        if occ.shape != X.shape[:1] + X.shape[2:3]:
            raise ValueError(f"occupancy must be (windows, cells), got {occ.shape}")
        if y is not None:
            y = np.asarray(y, dtype=np.float64)
            if y.shape != occ.shape:
                raise ValueError(f"y must be (windows, cells), got {y.shape}")
        return X, occ, y

    def _scale(self, X):
        return (X - self.feature_mean_) / self.feature_std_

    def _build(self, graph=None):
        self.graph_ = graph if graph is not None else build_graph(tuple(self.dims), self.connectivity)
        with default_dtype(self._np_dtype()):
            self.net_ = SpatioTemporalNet(self.config(), np.random.default_rng(self.seed))

    def _forward(self, Xs, occ):
        return self.net_(tensor(Xs.astype(self._np_dtype())), self.graph_, occupancy_mask(occ))

    def _loss(self, Xs, occ, y):
        m = occupancy_mask(occ)
        pred = self._forward(Xs, occ)
        return mse_loss(pred, tensor((y * m).astype(self._np_dtype())), weight=m)

    def _eval_mse(self, Xs, occ, y) -> float:
        out = []
        for i in range(0, len(Xs), max(1, self.batch_size)):
            sl = slice(i, i + max(1, self.batch_size))
            out.append(self._loss(Xs[sl], occ[sl], y[sl]).item() * occupancy_mask(occ[sl]).sum())
        return float(np.sum(out) / max(occupancy_mask(occ).sum(), 1.0))

    # -- estimator API -------------------------------------------------
    def fit(self, X, y, occupancy=None, eval_set=None, graph=None):
        """Train with Adam on the masked-cell MSE.

        ``eval_set=(X_val, y_val, occupancy_val)`` enables early stopping
        with ``patience``; the best-validation weights are restored.
        """
        self.config()
        self._build(graph)
        X, occ, y = self._check_inputs(X, occupancy, y)
        if len(X) == 0:
            raise ValueError("cannot fit on an empty dataset")
        if self.standardize:
            flat = X.reshape(-1, X.shape[-1])
            self.feature_mean_ = flat.mean(axis=0)
            std = flat.std(axis=0)
            self.feature_std_ = np.where(std > 0, std, 1.0)
        else:
            self.feature_mean_ = np.zeros(X.shape[-1])
            self.feature_std_ = np.ones(X.shape[-1])
        Xs = self._scale(X)
        val = None
        if eval_set is not None:
            Xv, yv, ov = eval_set
            Xv, ov, yv = self._check_inputs(Xv, ov, yv)
            val = (self._scale(Xv), ov, yv)

        rng = np.random.default_rng(self.seed)
        opt = Adam(self.net_.parameters(), lr=self.lr)
        bs = max(1, int(self.batch_size))
        self.loss_curve_ = []
        best, best_state, since_best = np.inf, None, 0
        self.stopped_epoch_ = None
        with default_dtype(self._np_dtype()):
            for epoch in range(1, int(self.epochs) + 1):
                order = rng.permutation(len(Xs))
                total, weight = 0.0, 0.0
                for i in range(0, len(order), bs):
                    b = order[i:i + bs]
                    opt.zero_grad()
                    with Tape() as tape:
                        loss = self._loss(Xs[b], occ[b], y[b])
                    tape.backward(loss)
                    opt.step()
                    w = occupancy_mask(occ[b]).sum()
                    total += loss.item() * w
                    weight += w
                train_mse = total / max(weight, 1.0)
                val_mse = self._eval_mse(*val) if val is not None else float("nan")
                self.loss_curve_.append((epoch, train_mse, val_mse))
                if self.verbose:
                    log.info("epoch %d train %.6g val %.6g", epoch, train_mse, val_mse)
                if val is None:
                    continue
                if val_mse < best:
                    best, best_state, since_best = val_mse, self.net_.state_dict(), 0
                else:
                    since_best += 1
                    if since_best >= self.patience:
                        self.stopped_epoch_ = epoch
                        break
        if best_state is not None:
            self.net_.load_state_dict(best_state)
        self.n_features_in_ = X.shape[-1]
        return self

    def predict(self, X, occupancy=None) -> np.ndarray:
        check_is_fitted(self, "net_")
        X, occ, _ = self._check_inputs(X, occupancy)
        Xs = self._scale(X)
        out = np.zeros(occ.shape)
        bs = max(1, int(self.batch_size))
        with default_dtype(self._np_dtype()):
            for i in range(0, len(Xs), bs):
                out[i:i + bs] = self._forward(Xs[i:i + bs], occ[i:i + bs]).data
        return out

    def score(self, X, y, occupancy=None, sample_weight=None) -> float:
        from .evaluation import r2_metric
        m = occupancy_mask(occupancy) if occupancy is not None else 1.0
        return r2_metric(self.predict(X, occupancy), np.asarray(y) * m).score

    # -- persistence ---------------------------------------------------
    def write_loss_curve(self, path) -> None:
        check_is_fitted(self, "loss_curve_")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_mse", "val_mse"])
            for epoch, tr, va in self.loss_curve_:
                w.writerow([epoch, repr(float(tr)), "" if np.isnan(va) else repr(float(va))])

    def save(self, path, meta=None) -> None:
        check_is_fitted(self, "net_")
        params = self.get_params()
        params["dims"] = list(params["dims"])
        tensors = {f"net.{k}": v for k, v in self.net_.state_dict().items()}
        tensors["feature_mean"] = self.feature_mean_
        tensors["feature_std"] = self.feature_std_
        write_checkpoint(path, tensors, CHECKPOINT_KIND,
                         {"params": params, "channels": list(CHANNELS), **(meta or {})})

    @classmethod
    def load(cls, path) -> "CellVisibilityPredictor":
        tensors, kind, meta = read_checkpoint(path)
        if kind != CHECKPOINT_KIND:
            raise ValueError(f"{path}: checkpoint kind {kind!r} is not {CHECKPOINT_KIND!r}")
        params = dict(meta["params"])
        params["dims"] = tuple(params["dims"])
        est = cls(**params)
        est._build()
        est.net_.load_state_dict({k[4:]: v for k, v in tensors.items() if k.startswith("net.")})
        est.feature_mean_ = tensors["feature_mean"]
        est.feature_std_ = tensors["feature_std"]
        est.n_features_in_ = len(CHANNELS)
        est.checkpoint_meta_ = meta
        return est

    def copy(self) -> "CellVisibilityPredictor":
        return copy.deepcopy(self)
