"""Central finite differences as an independent gradient oracle."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import Tape, Tensor, backward


def _scalar(v) -> float:
    data = v.data if isinstance(v, Tensor) else v
    return float(np.asarray(data).reshape(-1)[0])


def fd_grad(f: Callable[[Tensor], object], x: Tensor, eps: float = 1e-4) -> np.ndarray:
    """Estimate d f / d x by (f(x + eps e_i) - f(x - eps e_i)) / (2 eps) per coordinate.

    ``x.data`` is perturbed in place and restored afterwards.
    """
    flat = x.data.reshape(-1)
    if not np.shares_memory(flat, x.data):
        raise ValueError("fd_grad needs contiguous tensor storage")
    grad = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = _scalar(f(x))
        flat[i] = old - eps
        lo = _scalar(f(x))
        flat[i] = old
        grad[i] = (hi - lo) / (2 * eps)
    return grad.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||), falling back to the absolute gap when both vanish."""
    diff = float(np.linalg.norm(np.asarray(analytic, np.float64) - numeric))
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    return diff / scale if scale > 1e-10 else diff


def check_gradients(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor],
                    eps: float = 1e-4) -> dict[int, float]:
    """Compare tape gradients of ``loss_fn()`` against fd_grad for each tensor.

    Returns {index into ``tensors``: relative error}.
    """
    for t in tensors:
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
    with Tape():
        loss = loss_fn()
    backward(loss)
    errors = {}
    for i, t in enumerate(tensors):
        numeric = fd_grad(lambda _: loss_fn(), t, eps)
        errors[i] = relative_error(t.grad, numeric)
    return errors
