"""Static figures rendered from ``evaluate`` outputs."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def histogram_figure(report: dict, path: Path) -> Path:
    edges = np.asarray(report["histogram"]["edges"])
    counts = np.asarray(report["histogram"]["counts"], dtype=float)
    width = np.diff(edges)
    density = counts / max(counts.sum(), 1.0) / width
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(edges[:-1], density, width=width, align="edge", color="#4c72b0", edgecolor="white")
    ax.axvline(0.0, color="k", ls="--", lw=1)
    ax.set_xlabel("normalized prediction error")
    ax.set_ylabel("density")
    ax.set_title(f"{report['model']}: error distribution")
    return _save(fig, path)


def per_step_figure(reports: list[dict], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for rep in reports:
        curve = rep["per_step_mae"]
        ax.plot(range(1, len(curve) + 1), curve, marker="o", label=rep["model"])
    ax.set_xlabel("steps ahead")
    ax.set_ylabel("MAE (normalized)")
    ax.legend()
    ax.set_title("error by horizon")
    return _save(fig, path)


def per_region_figure(report: dict, path: Path) -> Path:
    regions = sorted(report["per_region"])
    vals = [report["per_region"][r]["mae"] for r in regions]
    fig, ax = plt.subplots(figsize=(max(5, 0.18 * len(regions) + 2), 3.5))
    ax.bar(range(len(regions)), vals, color="#55a868")
    ax.set_xticks(range(len(regions)))
    ax.set_xticklabels(regions, rotation=90, fontsize=6)
    ax.set_ylabel("MAE (normalized)")
    ax.set_title(f"{report['model']}: per-region MAE")
    return _save(fig, path)


def scatter_figure(pred_csv: Path, name: str, path: Path, max_points: int = 5000) -> Path:
    yt, yp = [], []
    with open(pred_csv, newline="") as fh:
        for row in csv.DictReader(fh):
            yt.append(float(row["y_true"]))
            yp.append(float(row["y_pred"]))
    yt, yp = np.asarray(yt), np.asarray(yp)
    if len(yt) > max_points:
        idx = np.linspace(0, len(yt) - 1, max_points).astype(int)
        yt, yp = yt[idx], yp[idx]
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(yt, yp, s=3, alpha=0.4)
    lo, hi = float(min(yt.min(), yp.min())), float(max(yt.max(), yp.max()))
    ax.plot([lo, hi], [lo, hi], "k--", lw=1)
    ax.set_xlabel("actual traffic")
    ax.set_ylabel("predicted traffic")
    ax.set_title(f"{name}: predicted vs actual")
    return _save(fig, path)


def render_reports(eval_dir: Path, out_dir: Path) -> list[Path]:
    """One figure set per ``*_report.json`` plus a shared horizon plot and summary table."""
    reports = []
    for path in sorted(eval_dir.glob("*_report.json")):
        rep = json.loads(path.read_text())
        rep["_stem"] = path.name[: -len("_report.json")]
        reports.append(rep)
    if not reports:
        return []
    written = []
    for rep in reports:
        stem = rep["_stem"]
        written.append(histogram_figure(rep, out_dir / f"{stem}_error_hist.png"))
        written.append(per_region_figure(rep, out_dir / f"{stem}_per_region_mae.png"))
        pred = eval_dir / f"{stem}_predictions.csv"
        if pred.is_file():
            written.append(scatter_figure(pred, rep["model"], out_dir / f"{stem}_scatter.png"))
    written.append(per_step_figure(reports, out_dir / "per_step_mae.png"))
    summary = out_dir / "summary.csv"
    with open(summary, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "mae", "rmse", "mape_percent", "pearson_r", "n"])
        for rep in reports:
            a = rep["aggregate"]
            w.writerow([rep["_stem"], a["mae"], a["rmse"], a["mape_percent"], a["pearson_r"], a["n"]])
    written.append(summary)
    return written
