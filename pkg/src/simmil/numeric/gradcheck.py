"""Central finite-difference gradient checking in float64."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max elementwise |a - n| / max(|a|, |n|); entries where both are below ``floor`` count as exact."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.maximum(np.abs(a), np.abs(n))
    keep = denom > floor
    if not keep.any():
        return 0.0
    return float(np.max(np.abs(a - n)[keep] / denom[keep]))


def numeric_grad(fn: Callable[[], Tensor], param: Tensor, step: float) -> np.ndarray:
    grad = np.zeros(param.data.shape, dtype=np.float64)
    flat = param.data.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = float(fn().data)
        flat[i] = orig - step
        down = float(fn().data)
        flat[i] = orig
        g[i] = (up - down) / (2 * step)
    return grad


def check_gradients(fn: Callable[[], Tensor], params: list[Tensor], step: float = 1e-6) -> float:
    """Return the max relative error between autodiff and finite differences over ``params``.

    ``fn`` must rebuild the scalar loss from the current parameter values on
    every call; parameters should be float64.
    """
    for p in params:
        p.grad = None
    fn().backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        worst = max(worst, relative_error(a, numeric_grad(fn, p, step)))
    return worst
