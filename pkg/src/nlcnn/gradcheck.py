"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, backward, no_grad


def numerical_gradient(graph_builder: Callable[[Tensor], Tensor], x: np.ndarray,
                       step: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = graph_builder(Tensor(x)).item()
            flat[i] = orig - step
            down = graph_builder(Tensor(x)).item()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
    return grad


def analytic_gradient(graph_builder: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    inp = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    backward(graph_builder(inp))
    return inp.grad if inp.grad is not None else np.zeros_like(inp.data)


def check_gradients(graph_builder: Callable[[Tensor], Tensor], input, step: float = 1e-5) -> float:
    """Max over coordinates of ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.

    ``graph_builder`` maps an input tensor to a scalar loss tensor and must be
    a deterministic function of its input.
    """
    x = input.data if isinstance(input, Tensor) else np.asarray(input, dtype=np.float64)
    a = analytic_gradient(graph_builder, x)
    n = numerical_gradient(graph_builder, x, step)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
