"""Reversible instance normalization for forecasting windows."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_EPS = 1e-5


@dataclass(frozen=True)
class RevinState:
    mean: float
    std: float
    eps: float = DEFAULT_EPS


def normalize(window, eps: float = DEFAULT_EPS) -> tuple[np.ndarray, RevinState]:
    """Standardize one window with its own mean and population std.

    The stored std is floored at ``eps``, so a constant window maps to zeros.
    """
    x = np.asarray(window, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot normalize an empty window")
    mu = float(x.mean())
    sd = max(float(x.std()), eps)
    return (x - mu) / sd, RevinState(mu, sd, eps)


def denormalize(values, state: RevinState) -> np.ndarray:
    return np.asarray(values, dtype=np.float64) * state.std + state.mean


def normalize_batch(windows: np.ndarray, eps: float = DEFAULT_EPS) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized :func:`normalize` over the trailing axis; returns (z, mean, std)."""
    w = np.asarray(windows, dtype=np.float64)
    mu = w.mean(axis=-1, keepdims=True)
    sd = np.maximum(w.std(axis=-1, keepdims=True), eps)
    return (w - mu) / sd, mu[..., 0], sd[..., 0]


def denormalize_batch(values: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return np.asarray(values) * std[..., None] + mean[..., None]
