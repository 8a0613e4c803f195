"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numeric_gradient(fn: Callable[[], Tensor], tensor: Tensor, h: float = 1e-5,
                     coords: np.ndarray | None = None) -> np.ndarray:
    """d fn / d tensor by central differences, at ``coords`` (flat indices) or everywhere."""
    flat = tensor.data.reshape(-1)
    idx = np.arange(flat.size) if coords is None else np.asarray(coords)
    out = np.zeros(len(idx))
    for n, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        plus = fn().item()
        flat[i] = orig - h
        minus = fn().item()
        flat[i] = orig
        out[n] = (plus - minus) / (2.0 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """``|a - n| / max(|a|, |n|)`` with vector 2-norms; 0 when both are ~0."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < floor:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5,
                    max_coords: int | None = None, seed: int = 0) -> dict[str, float]:
    """Relative error between backprop and finite differences for each tensor.

    ``fn`` rebuilds the scalar loss from the current tensor values. With
    ``max_coords`` only that many randomly chosen entries per tensor are probed.
    """
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    loss = fn()
    loss.backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in tensors]
    rng = np.random.default_rng(seed)
    errors = {}
    for i, (t, g) in enumerate(zip(tensors, analytic)):
        coords = None
        if max_coords is not None and t.data.size > max_coords:
            coords = np.sort(rng.choice(t.data.size, max_coords, replace=False))
        num = numeric_gradient(fn, t, h, coords)
        ana = g.reshape(-1) if coords is None else g.reshape(-1)[coords]
        errors[t.name or f"input{i}"] = relative_error(ana, num)
    return errors
