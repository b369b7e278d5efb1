"""Comparison forecasters: a DLinear-style decomposition model and seasonal naive."""

from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .params import ParamStore
from .tensor import Tensor

DLINEAR_KERNEL = 25


def moving_average(x: np.ndarray, kernel: int = DLINEAR_KERNEL) -> np.ndarray:
    """Centered moving average over the last axis with edge-replicated padding."""
    x = np.asarray(x, dtype=np.float64)
    front = (kernel - 1) // 2
    back = kernel - 1 - front
    pad = [(0, 0)] * (x.ndim - 1) + [(front, back)]
    padded = np.pad(x, pad, mode="edge")
    c = np.cumsum(padded, axis=-1)
    c = np.concatenate([np.zeros(x.shape[:-1] + (1,)), c], axis=-1)
    return (c[..., kernel:] - c[..., :-kernel]) / kernel


def decompose(x: np.ndarray, kernel: int = DLINEAR_KERNEL) -> tuple[np.ndarray, np.ndarray]:
    """Split into (trend, remainder) with ``trend + remainder == x``."""
    x = np.asarray(x, dtype=np.float64)
    trend = moving_average(x, kernel)
    return trend, x - trend


class DLinear:
    """Two independent H -> P linear maps over trend and remainder, summed."""

    def __init__(self, history: int, horizon: int, kernel: int = DLINEAR_KERNEL, seed: int = 0):
        if history < kernel:
            raise ValidationError(f"history {history} is shorter than the kernel {kernel}")
        self.history, self.horizon, self.kernel = history, horizon, kernel
        rng = np.random.default_rng(seed)
        s = self.store = ParamStore()
        bound = 1.0 / np.sqrt(history)
        self.w_trend = s.add("trend.w", rng.uniform(-bound, bound, (history, horizon)))
        self.b_trend = s.add("trend.b", np.zeros(horizon))
        self.w_season = s.add("season.w", rng.uniform(-bound, bound, (history, horizon)))
        self.b_season = s.add("season.b", np.zeros(horizon))

    def forward(self, windows: np.ndarray) -> Tensor:
        trend, rem = decompose(windows, self.kernel)
        return (Tensor(trend) @ self.w_trend + self.b_trend) + (Tensor(rem) @ self.w_season + self.b_season)

    def loss(self, batch) -> Tensor:
        diff = self.forward(batch.windows) - batch.targets
        return (diff * diff).mean()

    def predict(self, batch) -> np.ndarray:
        from .tensor import no_grad

        with no_grad():
            return self.forward(batch.windows).data


def dlinear_forecast(window, model: DLinear) -> np.ndarray:
    return DLinear.predict(model, _Single(np.asarray(window, dtype=float)[None, :]))[0]


class _Single:
    def __init__(self, windows):
        self.windows = windows


def seasonal_naive(window, period: int, horizon: int) -> np.ndarray:
    """``yhat[t+i] = x[t+i-period]``, repeating the last season when ``horizon > period``."""
    x = np.asarray(window, dtype=np.float64)
    if period < 1 or period > x.shape[-1]:
        raise ValidationError(f"period {period} must lie in [1, {x.shape[-1]}]")
    season = x[..., x.shape[-1] - period:]
    reps = -(-horizon // period)
    return np.concatenate([season] * reps, axis=-1)[..., :horizon]
