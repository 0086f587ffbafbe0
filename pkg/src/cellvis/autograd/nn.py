"""Small layer library on top of the tensor engine."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .tensor import Tensor, concat, get_default_dtype, relu, sigmoid, tanh

__all__ = ["Module", "Linear", "MLP", "GRUCell", "LSTMCell", "glorot"]


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class Module:
    """Container whose Tensor attributes with ``requires_grad`` are parameters.

    Parameter order follows attribute assignment order, recursively, which
    keeps checkpoints and optimizer state deterministic.
    """

    def __setattr__(self, name, value):
        if "_order" not in self.__dict__:
            object.__setattr__(self, "_order", [])
        if name not in self._order and not name.startswith("_"):
            self._order.append(name)
        object.__setattr__(self, name, value)

    def param(self, data, name=None) -> Tensor:
        return Tensor(np.asarray(data, dtype=get_default_dtype()), requires_grad=True, name=name)

    def named_parameters(self, prefix: str = ""):
        out = OrderedDict()
        for name in self.__dict__.get("_order", []):
            value = self.__dict__[name]
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(key + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{key}.{i}"] = item
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    def state_dict(self) -> dict:
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"{k}: checkpoint shape {arr.shape} != parameter shape {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = self.param(glorot(rng, n_in, n_out))
        self.bias = self.param(np.zeros(n_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class MLP(Module):
    """Fully connected stack with relu between layers and none after the last."""

    def __init__(self, sizes, rng: np.random.Generator):
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = relu(x)
        return x


class GRUCell(Module):
    """Gated recurrent unit, one step.

    ``z`` is the update gate and weights the candidate:
    ``h' = (1 - z) * h + z * n`` with ``n = tanh(W_n x + b_n + r * (U_n h + c_n))``.
    """

    def __init__(self, n_in: int, n_hidden: int, rng: np.random.Generator):
        self.n_hidden = n_hidden
        self.w_ih = self.param(glorot(rng, n_in, 3 * n_hidden))
        self.w_hh = self.param(glorot(rng, n_hidden, 3 * n_hidden))
        self.b_ih = self.param(np.zeros(3 * n_hidden))
        self.b_hh = self.param(np.zeros(3 * n_hidden))

    def forward(self, x: Tensor, h: Tensor) -> Tensor:
        k = self.n_hidden
        gi = x @ self.w_ih + self.b_ih
        gh = h @ self.w_hh + self.b_hh
        r = sigmoid(gi[..., :k] + gh[..., :k])
        z = sigmoid(gi[..., k:2 * k] + gh[..., k:2 * k])
        n = tanh(gi[..., 2 * k:] + r * gh[..., 2 * k:])
        return h + z * (n - h)


class LSTMCell(Module):
    def __init__(self, n_in: int, n_hidden: int, rng: np.random.Generator):
        self.n_hidden = n_hidden
        self.w = self.param(glorot(rng, n_in + n_hidden, 4 * n_hidden))
        b = np.zeros(4 * n_hidden)
        b[n_hidden:2 * n_hidden] = 1.0  # forget-gate bias
        self.b = self.param(b)

    def forward(self, x: Tensor, state):
        h, c = state
        k = self.n_hidden
        g = concat([x, h], axis=-1) @ self.w + self.b
        i = sigmoid(g[..., :k])
        f = sigmoid(g[..., k:2 * k])
        o = sigmoid(g[..., 2 * k:3 * k])
        u = tanh(g[..., 3 * k:])
        c = f * c + i * u
        h = o * tanh(c)
        return h, c
