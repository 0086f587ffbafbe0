"""Dense tensors with define-by-run reverse-mode differentiation.

Operations executed inside an active :class:`Tape` are recorded together
with a closure mapping the output gradient to input gradients. Outside a
tape nothing is recorded, which doubles as inference mode::

    with Tape() as tape:
        loss = mse_loss(model(x), y)
    tape.backward(loss)
"""
from __future__ import annotations

import contextlib

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "get_default_dtype",
    "set_default_dtype",
    "default_dtype",
    "set_debug",
    "tensor",
    "as_tensor",
    "concat",
    "stack",
    "take",
    "where",
    "sigmoid",
    "tanh",
    "relu",
    "exp",
    "softmax",
    "mse_loss",
    "guard_denominator",
    "backward",
]

_dtype = np.float64
_debug = False
_tapes: list = []


class ShapeError(ValueError):
    pass


def get_default_dtype():
    return _dtype


def set_default_dtype(dtype) -> None:
    """Select float32 (training throughput) or float64 (tests, grad checks)."""
    global _dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError("default dtype must be float32 or float64")
    _dtype = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def set_debug(flag: bool) -> None:
    """When on, any op producing NaN raises ``FloatingPointError``."""
    global _debug
    _debug = bool(flag)


class Tape:
    """Ordered record of differentiable operations.

    Records are appended as ops run, so they are already in topological
    order; :meth:`backward` walks them once in reverse.
    """

    def __init__(self):
        self.records = []

    def __enter__(self):
        _tapes.append(self)
        return self

    def __exit__(self, *exc):
        _tapes.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def record(self, out, parents, backward_fn):
        out._tape = self
        self.records.append((out, parents, backward_fn))

    def backward(self, loss: "Tensor") -> None:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.records:
            raise ValueError("tape is empty; nothing to differentiate")
        grads = {id(loss): np.ones_like(loss.data)}
        for out, parents, fn in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for p, pg in zip(parents, fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                if p._tape is None:
                    p.grad = pg.astype(p.data.dtype, copy=True) if p.grad is None else p.grad + pg
                elif id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
        # leaves on which the loss does not depend still report a zero gradient
        for out, parents, _ in self.records:
            for p in parents:
                if p.requires_grad and p._tape is None and p.grad is None:
                    p.grad = np.zeros_like(p.data)


def backward(loss: "Tensor") -> None:
    if loss._tape is None:
        raise ValueError("loss was not computed under a Tape")
    loss._tape.backward(loss)


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_nan(data, name):
    if _debug and np.isnan(data).any():
        raise FloatingPointError(f"NaN produced by {name}")


def _result(data, parents, backward_fn, name):
    out = Tensor(data)
    _check_nan(out.data, name)
    if _tapes and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _tapes[-1].record(out, parents, backward_fn)
    return out


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_tape", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._tape = None
        self.name = name

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def zero_grad(self):
        self.grad = None if self.grad is None else np.zeros_like(self.data)

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, like=self)))

    def __rsub__(self, other):
        return add(as_tensor(other, like=self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other, like=self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # reductions and shape ---------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return tsum(self, axis, keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


def tensor(data, requires_grad=False, name=None, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype or _dtype), requires_grad, name)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _dtype
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _broadcast_shape(a, b, name):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def neg(a) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * out / bd, bd.shape)), "div")


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def back(g):
        return (_unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape),
                _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape))
    return _result(ad @ bd, (a, b), back, "matmul")


def tsum(a, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return _result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), back, "sum")


def reshape(a, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from None
    return _result(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, idx) -> Tensor:
    if isinstance(idx, Tensor):
        idx = idx.data
    shape, dtype = a.shape, a.dtype

    def back(g):
        z = np.zeros(shape, dtype=dtype)
        np.add.at(z, idx, g)
        return (z,)
    return _result(a.data[idx], (a,), back, "getitem")


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with an integer index array of any shape."""
    idx = np.asarray(indices)
    n = a.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise IndexError(f"take: index out of range for axis of size {n}")
    shape, dtype = a.shape, a.dtype
    ax = axis % a.ndim

    def back(g):
        z = np.zeros(shape, dtype=dtype)
        zm = np.moveaxis(z, ax, 0)
        gm = np.moveaxis(g, list(range(ax, ax + idx.ndim)), list(range(idx.ndim)))
        np.add.at(zm, idx, gm)
        return (z,)
    return _result(np.take(a.data, idx, axis=ax), (a,), back, "take")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        s0 = tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]
        s1 = t.shape[:ax] + t.shape[ax + 1:]
        if t.ndim != tensors[0].ndim or s0 != s1:
            raise ShapeError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors),
                   lambda g: tuple(np.split(g, splits, axis=ax)), "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    return concat([reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                   for t in tensors], axis=axis)


def where(cond, a, b) -> Tensor:
    a, b = _pair(a, b)
    c = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape
    return _result(np.where(c, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(np.where(c, g, 0), sa),
                              _unbroadcast(np.where(c, 0, g), sb)), "where")


def sigmoid(a) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Tensor:
    pos = a.data > 0
    return _result(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,), "relu")


def exp(a) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def softmax(a, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get exactly 0."""
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = (e / e.sum(axis=axis, keepdims=True)).astype(a.dtype)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _result(out, (a,), back, "softmax")


def guard_denominator(a, eps: float = 1e-8) -> Tensor:
    """Push values with ``|x| < eps`` out to ``+-eps`` (sign kept, 0 -> +eps)."""
    x = a.data
    small = np.abs(x) < eps
    out = np.where(small, np.where(x < 0, -eps, eps), x).astype(a.dtype)
    return _result(out, (a,), lambda g: (np.where(small, 0, g),), "guard_denominator")


def mse_loss(pred, target, weight=None) -> Tensor:
    """Mean squared error; with ``weight`` the weighted mean ``sum(w d^2) / sum(w)``."""
    pred, target = _pair(pred, target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: shapes {pred.shape} and {target.shape} differ")
    d = pred - target
    sq = d * d
    if weight is None:
        return sq.mean()
    w = np.broadcast_to(np.asarray(weight, dtype=pred.dtype), pred.shape)
    total = float(w.sum())
    return (sq * w).sum() * (1.0 / max(total, 1.0))
