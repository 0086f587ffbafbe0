"""Trajectory-extrapolation baselines.

Each baseline predicts a future 6DoF pose from a history of poses; the
predicted pose is then turned into cell features with the same operators
used for ground truth, so the comparison is made in feature space.

Angles are regressed as ``(sin, cos)`` pairs (9 channels in total) and
decoded with ``atan2``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .autograd import MLP, Adam, Linear, LSTMCell, Module, Tape, default_dtype, mse_loss, tensor
from .camera import CameraIntrinsics, Pose6DoF, decode_poses, encode_poses
from .cellgrid import DEFAULT_VOXEL_SIZE, CellGrid, assign_cells, viewport_feature, visibility_feature
from .formats import read_checkpoint, write_checkpoint
from .hpr import HprParams
from .pc_io import PointCloudFrame

__all__ = [
    "BASELINE_KINDS",
    "MONOTONE_TOL",
    "encode_window",
    "lr_extrapolate",
    "monotone_suffix_start",
    "tlr_extrapolate",
    "lr_predict",
    "tlr_predict",
    "MMLPNet",
    "MLSTMNet",
    "LinearPoseRegressor",
    "MMLPRegressor",
    "MLSTMRegressor",
    "pose_to_features",
]

BASELINE_KINDS = ("LR", "TLR", "M-MLP", "M-LSTM")
MONOTONE_TOL = 1e-12
N_ENCODED = 9


def encode_window(window) -> np.ndarray:
    """``(h, 6)`` poses (or a list of :class:`Pose6DoF`) -> ``(h, 9)``."""
    if len(window) and isinstance(window[0], Pose6DoF):
        window = np.array([p.as_array() for p in window])
    w = np.asarray(window, dtype=np.float64)
    if w.ndim < 2 or w.shape[-1] != 6:
        raise ValueError(f"pose window must be (..., h, 6), got {w.shape}")
    return encode_poses(w)


def lr_extrapolate(values, horizon: int) -> np.ndarray:
    """Least-squares line through ``(t, values[t])``, evaluated at ``h - 1 + horizon``.

    ``values`` is ``(h, ...)``; every trailing column is fitted independently.
    """
    y = np.asarray(values, dtype=np.float64)
    h = y.shape[0]
    if h < 2:
        raise ValueError("linear extrapolation needs at least two samples")
    t = np.arange(h, dtype=np.float64)
    tc = t - t.mean()
    ym = y.mean(axis=0)
    slope = np.tensordot(tc, y - ym, axes=(0, 0)) / np.dot(tc, tc)
    return ym + slope * (h - 1 + horizon - t.mean())


def monotone_suffix_start(values, tol: float = MONOTONE_TOL) -> int:
    """Start of the longest strictly monotone suffix of a 1-D series.

    Returns ``len(values) - 1`` when the last step is flat (no suffix of
    length two exists).
    """
    v = np.asarray(values, dtype=np.float64)
    n = len(v)
    if n < 2:
        return n - 1
    d = np.diff(v)
    if abs(d[-1]) <= tol:
        return n - 1
    sign = np.sign(d[-1])
    i = n - 2
    while i > 0 and sign * d[i - 1] > tol:
        i -= 1
    return i


def tlr_extrapolate(values, horizon: int, tol: float = MONOTONE_TOL) -> np.ndarray:
    y = np.asarray(values, dtype=np.float64)
    if y.shape[0] < 2:
        raise ValueError("TLR needs at least two samples")
    cols = y.reshape(y.shape[0], -1)
    out = np.empty(cols.shape[1])
    for c in range(cols.shape[1]):
        s = monotone_suffix_start(cols[:, c], tol)
        seg = cols[s:, c]
        out[c] = seg[-1] if len(seg) < 2 else lr_extrapolate(seg, horizon)
    return out.reshape(y.shape[1:])


def _decode(encoded) -> Pose6DoF:
    return Pose6DoF.from_array(decode_poses(encoded))


def lr_predict(window, horizon: int) -> Pose6DoF:
    return _decode(lr_extrapolate(encode_window(window), horizon))


def tlr_predict(window, horizon: int) -> Pose6DoF:
    return _decode(tlr_extrapolate(encode_window(window), horizon))


# -- learned baselines --------------------------------------------------

class MMLPNet(Module):
    """Flattened ``9 * h`` window -> 9 encoded channels, relu hidden layers."""

    def __init__(self, history: int, hidden=(60, 60), rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.history = history
        self.mlp = MLP([N_ENCODED * history, *hidden, N_ENCODED], rng)

    def forward(self, x):
        B = x.shape[0]
        return self.mlp(x.reshape(B, self.history * N_ENCODED))


class MLSTMNet(Module):
    """Stacked LSTM over the window; the last top-layer state maps to 9 channels."""

    def __init__(self, hidden: int = 60, layers: int = 2, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.hidden = hidden
        sizes = [N_ENCODED] + [hidden] * layers
        self.cells = [LSTMCell(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
        self.out = Linear(hidden, N_ENCODED, rng)

    def forward(self, x):
        B, h, _ = x.shape
        zero = tensor(np.zeros((B, self.hidden)))
        states = [(zero, zero) for _ in self.cells]
        for t in range(h):
            inp = x[:, t]
            for k, cell in enumerate(self.cells):
                states[k] = cell(inp, states[k])
                inp = states[k][0]
        return self.out(states[-1][0])


class LinearPoseRegressor(RegressorMixin, BaseEstimator):
    """LR or TLR on the last ``history`` poses; ``fit`` only validates."""

    def __init__(self, kind="LR", history=30, horizon=10):
        self.kind = kind
        self.history = history
        self.horizon = horizon

    def fit(self, X=None, y=None):
        if self.kind not in ("LR", "TLR"):
            raise ValueError(f"kind must be LR or TLR, got {self.kind!r}")
        if self.history < 2:
            raise ValueError("history must be >= 2")
        self.fitted_ = True
        return self

    def predict(self, X) -> np.ndarray:
        """``(W, h, 6)`` pose windows -> ``(W, 6)`` predicted poses."""
        check_is_fitted(self, "fitted_")
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3 or X.shape[2] != 6 or X.shape[1] < self.history:
            raise ValueError(f"X must be (windows, >= {self.history}, 6), got {X.shape}")
        fn = lr_extrapolate if self.kind == "LR" else tlr_extrapolate
        enc = encode_poses(X[:, -self.history:])
        return np.stack([decode_poses(fn(w, self.horizon)) for w in enc]) if len(X) else np.zeros((0, 6))


class _LearnedPoseRegressor(RegressorMixin, BaseEstimator):
    _kind = ""

    def _make_net(self, rng):
        raise NotImplementedError

    def _prepare(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3 or X.shape[2] != 6 or X.shape[1] < self.history:
            raise ValueError(f"X must be (windows, >= {self.history}, 6), got {X.shape}")
        return encode_poses(X[:, -self.history:])

    def _build(self):
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        with default_dtype(np.dtype(self.dtype)):
            self.net_ = self._make_net(np.random.default_rng(self.seed))

    def _forward(self, Xs):
        with default_dtype(np.dtype(self.dtype)):
            return self.net_(tensor(Xs.astype(self.dtype)))

    def fit(self, X, y, eval_set=None):
        """``X`` ``(W, h, 6)`` pose windows, ``y`` ``(W, 6)`` target poses."""
        enc = self._prepare(X)
        target = encode_poses(np.asarray(y, dtype=np.float64))
        if len(enc) == 0:
            raise ValueError("cannot fit on an empty dataset")
        if target.shape != (len(enc), N_ENCODED):
            raise ValueError(f"y must be (windows, 6), got {np.shape(y)}")
        self._build()
        flat = enc.reshape(-1, N_ENCODED)
        self.x_mean_ = flat.mean(axis=0)
        sd = flat.std(axis=0)
        self.x_std_ = np.where(sd > 0, sd, 1.0)
        self.y_mean_ = target.mean(axis=0)
        sd = target.std(axis=0)
        self.y_std_ = np.where(sd > 0, sd, 1.0)
        Xs = (enc - self.x_mean_) / self.x_std_
        Ys = (target - self.y_mean_) / self.y_std_
        val = None
        if eval_set is not None:
            Xv = (self._prepare(eval_set[0]) - self.x_mean_) / self.x_std_
            Yv = (encode_poses(np.asarray(eval_set[1], dtype=np.float64)) - self.y_mean_) / self.y_std_
            val = (Xv, Yv)
        rng = np.random.default_rng(self.seed)
        opt = Adam(self.net_.parameters(), lr=self.lr)
        bs = max(1, int(self.batch_size))
        self.loss_curve_ = []
        best, best_state, since = np.inf, None, 0
        with default_dtype(np.dtype(self.dtype)):
            for epoch in range(1, int(self.epochs) + 1):
                order = rng.permutation(len(Xs))
                total = 0.0
                for i in range(0, len(order), bs):
                    b = order[i:i + bs]
                    opt.zero_grad()
                    with Tape() as tape:
                        loss = mse_loss(self._forward(Xs[b]), tensor(Ys[b].astype(self.dtype)))
                    tape.backward(loss)
                    opt.step()
                    total += loss.item() * len(b)
                val_mse = float("nan")
                if val is not None:
                    val_mse = float(np.mean((self._forward(val[0]).data - val[1]) ** 2))
                self.loss_curve_.append((epoch, total / len(Xs), val_mse))
                if val is None:
                    continue
                if val_mse < best:
                    best, best_state, since = val_mse, self.net_.state_dict(), 0
                else:
                    since += 1
                    if since >= self.patience:
                        break
        if best_state is not None:
            self.net_.load_state_dict(best_state)
        return self

    def predict_encoded(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        Xs = (self._prepare(X) - self.x_mean_) / self.x_std_
        return self._forward(Xs).data.astype(np.float64) * self.y_std_ + self.y_mean_

    def predict(self, X) -> np.ndarray:
        return decode_poses(self.predict_encoded(X))

    def save(self, path, meta=None) -> None:
        check_is_fitted(self, "net_")
        tensors = {f"net.{k}": v for k, v in self.net_.state_dict().items()}
        for k in ("x_mean_", "x_std_", "y_mean_", "y_std_"):
            tensors[k] = getattr(self, k)
        write_checkpoint(path, tensors, self._kind, {"params": self.get_params(), **(meta or {})})

    @classmethod
    def load(cls, path):
        tensors, kind, meta = read_checkpoint(path)
        if kind != cls._kind:
            raise ValueError(f"{path}: checkpoint kind {kind!r} is not {cls._kind!r}")
        params = dict(meta["params"])
        if "hidden" in params and isinstance(params["hidden"], list):
            params["hidden"] = tuple(params["hidden"])
        est = cls(**params)
        est._build()
        est.net_.load_state_dict({k[4:]: v for k, v in tensors.items() if k.startswith("net.")})
        for k in ("x_mean_", "x_std_", "y_mean_", "y_std_"):
            setattr(est, k, tensors[k])
        return est


class MMLPRegressor(_LearnedPoseRegressor):
    """Multi-task MLP predicting all nine encoded channels jointly."""

    _kind = "mmlp"

    def __init__(self, history=90, horizon=10, hidden=(60, 60), lr=3e-4, batch_size=32,
                 epochs=30, patience=5, seed=0, dtype="float32"):
        self.history = history
        self.horizon = horizon
        self.hidden = hidden
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.patience = patience
        self.seed = seed
        self.dtype = dtype

    def _make_net(self, rng):
        return MMLPNet(self.history, tuple(self.hidden), rng)


class MLSTMRegressor(_LearnedPoseRegressor):
    """Two-layer LSTM over the encoded window."""

    _kind = "mlstm"

    def __init__(self, history=90, horizon=10, hidden=60, layers=2, lr=3e-4, batch_size=32,
                 epochs=30, patience=5, seed=0, dtype="float32"):
        self.history = history
        self.horizon = horizon
        self.hidden = hidden
        self.layers = layers
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.patience = patience
        self.seed = seed
        self.dtype = dtype

    def _make_net(self, rng):
        return MLSTMNet(self.hidden, self.layers, rng)


def pose_to_features(pose: Pose6DoF, frame: PointCloudFrame, grid: CellGrid,
                     intrinsics: CameraIntrinsics = CameraIntrinsics(),
                     hpr_params: HprParams = HprParams(),
                     voxel_size: float = DEFAULT_VOXEL_SIZE,
                     samples_per_cell: int = 64, hull: str = "quickhull"):
    """``(F, V)`` for ``frame`` seen from ``pose``, via the ground-truth operators."""
    if not isinstance(pose, Pose6DoF):
        pose = Pose6DoF.from_array(pose)
    asg = assign_cells(frame, grid)
    f = viewport_feature(grid, pose, intrinsics, samples_per_cell)
    v = visibility_feature(frame, grid, pose, intrinsics, hpr_params, voxel_size, asg, hull).values
    return f, v
