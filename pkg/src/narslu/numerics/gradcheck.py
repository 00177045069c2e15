"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, backward


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    a, n = np.asarray(analytic, float), np.asarray(numeric, float)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grad(f: Callable[[], float], x: np.ndarray, index: tuple, eps: float) -> float:
    old = x[index]
    x[index] = old + eps
    up = f()
    x[index] = old - eps
    down = f()
    x[index] = old
    return (up - down) / (2.0 * eps)


def check_gradients(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-3,
                    samples: Optional[int] = None, rng: Optional[np.random.Generator] = None,
                    floor: float = 1e-6) -> float:
    """Max relative error between backprop and central differences.

    ``loss_fn`` rebuilds the graph from the current tensor values and returns
    a scalar. With ``samples`` set, that many entries are drawn (uniformly
    over all entries of all tensors) instead of checking every entry.
    """
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    def value() -> float:
        return float(loss_fn().data)

    entries = [(i, idx) for i, t in enumerate(tensors) for idx in np.ndindex(t.shape)]
    if samples is not None and samples < len(entries):
        rng = rng or np.random.default_rng(0)
        entries = [entries[j] for j in rng.choice(len(entries), size=samples, replace=False)]
    worst = 0.0
    for i, idx in entries:
        num = numeric_grad(value, tensors[i].data, idx, eps)
        worst = max(worst, float(relative_error(analytic[i][idx], num, floor)))
    return worst
