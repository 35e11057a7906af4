"""Central finite-difference gradients, used as an oracle for the tape."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_gradient(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5,
                       coords: Sequence[int] | None = None) -> np.ndarray:
    """d fn() / d param by central differences, perturbing ``param.data`` in place.

    ``coords`` restricts the work to those flat indices; other entries are NaN.
    """
    flat = param.data.reshape(-1)
    if coords is None:
        coords = range(flat.size)
        grad = np.zeros(flat.size, dtype=np.float64)
    else:
        grad = np.full(flat.size, np.nan)
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        up = float(fn().data)
        flat[i] = orig - h
        down = float(fn().data)
        flat[i] = orig
        grad[i] = (up - down) / (2 * h)
    return grad.reshape(param.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| / max(|a|, |n|, floor) over entries where ``numeric`` is defined."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    keep = ~np.isnan(n)
    a, n = a[keep], n[keep]
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5, floor: float = 1e-6,
                    max_coords: int | None = None, seed: int = 0) -> float:
    """Largest relative error between tape and finite-difference gradients.

    ``fn`` must rebuild the graph on every call. With ``max_coords`` only that
    many randomly chosen entries per parameter are differenced.
    """
    for p in params:
        p.grad = None
    out = fn()
    out.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        coords = None
        if max_coords is not None and p.size > max_coords:
            coords = rng.choice(p.size, size=max_coords, replace=False)
        numeric = numerical_gradient(fn, p, h, coords)
        worst = max(worst, relative_error(analytic, numeric, floor))
    return worst
