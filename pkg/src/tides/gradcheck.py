"""Central finite-difference gradient checks.

The numeric side only ever calls the forward function on raw arrays under
``no_grad``; it shares nothing with the tape beyond the forward ops.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def numerical_grad(fn: Callable[[], Tensor], param: Tensor, step: float = 1e-5, coords=None) -> np.ndarray:
    """d fn() / d param by central differences at ``coords`` (flat indices, default all)."""
    flat = param.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    idx = range(flat.size) if coords is None else coords
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = fn().item()
            flat[i] = orig - step
            down = fn().item()
            flat[i] = orig
            out[i] = (up - down) / (2.0 * step)
    return out.reshape(param.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    a = np.asarray(analytic).reshape(-1)
    n = np.asarray(numeric).reshape(-1)
    keep = ~np.isnan(n)
    a, n = a[keep], n[keep]
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def gradcheck(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between tape gradients and finite differences.

    ``max_coords`` samples that many coordinates per parameter instead of
    sweeping all of them.
    """
    for p in params:
        p.zero_grad()
    backward(fn())
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for p in params:
        coords = None
        if max_coords is not None and p.size > max_coords:
            coords = rng.choice(p.size, size=max_coords, replace=False)
        num = numerical_grad(fn, p, step, coords)
        worst = max(worst, relative_error(p.grad, num))
    return worst
