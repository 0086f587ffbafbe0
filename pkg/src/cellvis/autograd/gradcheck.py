"""Central-difference gradient verification."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tape

__all__ = ["GradCheckReport", "gradient_check", "numeric_gradient"]


@dataclass
class GradCheckReport:
    """Per-parameter ``max|analytic - numeric| / max(max|analytic|, max|numeric|, floor)``.

    The floor keeps parameters whose true gradient is zero (a softmax key
    bias, for instance) from turning finite-difference noise into a
    relative error of 1.
    """

    errors: dict = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def failures(self) -> dict:
        return {k: e for k, e in self.errors.items() if e > self.tolerance}


def numeric_gradient(loss_fn, param, h: float = 1e-5) -> np.ndarray:
    out = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    g = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn().item()
        flat[i] = orig - h
        down = loss_fn().item()
        flat[i] = orig
        g[i] = (up - down) / (2 * h)
    return out


def gradient_check(module, loss_fn, tolerance: float = 1e-4, h: float = 1e-5,
                   analytic: dict | None = None, floor: float = 1e-6) -> GradCheckReport:
    """Compare tape gradients of ``loss_fn()`` with central differences.

    ``loss_fn`` takes no arguments and returns a scalar Tensor built from
    ``module``'s parameters. ``analytic`` overrides the tape gradients
    (used to confirm that a wrong gradient is reported).
    """
    params = module.named_parameters()
    if analytic is None:
        module.zero_grad()
        with Tape() as tape:
            loss = loss_fn()
        tape.backward(loss)
        analytic = {k: p.grad.copy() for k, p in params.items()}
    report = GradCheckReport(tolerance=tolerance)
    for k, p in params.items():
        a = np.asarray(analytic[k], dtype=np.float64)
        n = numeric_gradient(loss_fn, p, h)
        scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
        diff = np.abs(a - n).max(initial=0.0)
        report.errors[k] = 0.0 if diff == 0 else float(diff / max(scale, floor))
    return report
