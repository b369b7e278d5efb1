"""Forecast error metrics and the evaluation report."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError

MAPE_FLOOR = 1e-2
HIST_EDGES = np.linspace(-3.0, 3.0, 25)


def _pair(y, yhat) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    yhat = np.asarray(yhat, dtype=np.float64).reshape(-1)
    if y.shape != yhat.shape:
        raise ValidationError(f"length mismatch: {y.size} targets vs {yhat.size} predictions")
    if y.size == 0:
        raise ValidationError("metrics need at least one value")
    return y, yhat


def mae(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.mean(np.abs(y - yhat)))


def rmse(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.sqrt(np.mean((y - yhat) ** 2)))


def mape_percent(y, yhat, floor: float = MAPE_FLOOR) -> float:
    """100 * mean(|y - yhat| / max(|y|, floor)); see :func:`mape_unreliable`."""
    y, yhat = _pair(y, yhat)
    return float(100.0 * np.mean(np.abs(y - yhat) / np.maximum(np.abs(y), floor)))


def mape_unreliable(y, floor: float = MAPE_FLOOR) -> bool:
    """True when every target sits below the floor, so MAPE measures the floor, not the data."""
    return bool(np.all(np.abs(np.asarray(y, dtype=np.float64)) < floor))


def pearson_r(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    yc, pc = y - y.mean(), yhat - yhat.mean()
    syy, spp = (yc * yc).sum(), (pc * pc).sum()
    if syy == 0 or spp == 0:
        raise ValidationError("Pearson correlation is undefined for a zero-variance input")
    # one square root of the product keeps r == 1 exact for identical inputs
    return float(np.clip((yc * pc).sum() / np.sqrt(syy * spp), -1.0, 1.0))


def metric_block(y, yhat, y_orig=None, yhat_orig=None, floor: float = MAPE_FLOOR) -> dict:
    """MAE/RMSE/r on the given scale, MAPE on original units when supplied."""
    y_m = y if y_orig is None else y_orig
    p_m = yhat if yhat_orig is None else yhat_orig
    try:
        r = pearson_r(y, yhat)
    except ValidationError:
        r = float("nan")
    return {
        "mae": mae(y, yhat),
        "rmse": rmse(y, yhat),
        "mape_percent": mape_percent(y_m, p_m, floor),
        "mape_unreliable": mape_unreliable(y_m, floor),
        "pearson_r": r,
        "n": int(np.asarray(y).size),
    }


@dataclass
class EvalReport:
    """Metrics over stored (y_true, y_pred) pairs.

    ``y_true``/``y_pred`` are normalized-series values shaped (N, R, P);
    ``*_orig`` are the same in original traffic units.
    """

    model: str
    region_ids: list[str]
    y_true: np.ndarray
    y_pred: np.ndarray
    y_true_orig: np.ndarray
    y_pred_orig: np.ndarray
    meta: dict = field(default_factory=dict)
    mape_floor: float = MAPE_FLOOR

    @property
    def aggregate(self) -> dict:
        return metric_block(self.y_true, self.y_pred, self.y_true_orig, self.y_pred_orig, self.mape_floor)

    def per_region(self) -> dict[str, dict]:
        return {
            r: metric_block(self.y_true[:, i], self.y_pred[:, i], self.y_true_orig[:, i], self.y_pred_orig[:, i],
                            self.mape_floor)
            for i, r in enumerate(self.region_ids)
        }

    def per_step_mae(self) -> list[float]:
        return [mae(self.y_true[..., k], self.y_pred[..., k]) for k in range(self.y_true.shape[-1])]

    def error_histogram(self) -> tuple[np.ndarray, np.ndarray]:
        err = (self.y_pred - self.y_true).reshape(-1)
        counts, _ = np.histogram(np.clip(err, HIST_EDGES[0], HIST_EDGES[-1]), bins=HIST_EDGES)
        return HIST_EDGES, counts

    def to_dict(self) -> dict:
        edges, counts = self.error_histogram()
        return {
            "model": self.model,
            "meta": self.meta,
            "aggregate": self.aggregate,
            "per_region": self.per_region(),
            "per_step_mae": self.per_step_mae(),
            "histogram": {"edges": edges.tolist(), "counts": counts.tolist()},
            "units": {"mae": "normalized", "rmse": "normalized", "pearson_r": "normalized",
                      "mape_percent": "percent of original traffic", "mape_floor": self.mape_floor},
        }

    def write(self, out_dir, prefix: str | None = None) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = prefix or self.model
        paths = [out / f"{stem}_report.json", out / f"{stem}_per_region.csv",
                 out / f"{stem}_per_step.csv", out / f"{stem}_histogram.csv"]
        paths[0].write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        cols = ["mae", "rmse", "mape_percent", "mape_unreliable", "pearson_r", "n"]
        with open(paths[1], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["region_id"] + cols)
            for r, m in self.per_region().items():
                w.writerow([r] + [m[c] for c in cols])
            agg = self.aggregate
            w.writerow(["ALL"] + [agg[c] for c in cols])
        with open(paths[2], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["horizon", "mae"])
            for k, v in enumerate(self.per_step_mae(), start=1):
                w.writerow([k, v])
        edges, counts = self.error_histogram()
        with open(paths[3], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_lo", "bin_hi", "count"])
            for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                w.writerow([lo, hi, int(c)])
        return paths
