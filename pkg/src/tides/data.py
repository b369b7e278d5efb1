"""Traffic datasets: CSV ingestion, windowing, chronological splits, synthetic cities."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .geo import RegionMeta, haversine_matrix

INTERVAL_MINUTES = 15
STEPS_PER_DAY = 1440 // INTERVAL_MINUTES


@dataclass
class TrafficSeries:
    region_id: str
    start_time: np.datetime64
    values: np.ndarray
    interval_minutes: int = INTERVAL_MINUTES

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.start_time = np.datetime64(self.start_time, "m")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValidationError(f"series {self.region_id} must be finite and non-negative")

    @property
    def timestamps(self) -> np.ndarray:
        return self.start_time + np.arange(len(self.values)) * np.timedelta64(self.interval_minutes, "m")

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class WindowSample:
    region_id: str
    input: np.ndarray
    target: np.ndarray
    input_timestamps: np.ndarray
    start: int = 0


# ------------------------------------------------------------------------ CSV
def write_csv(series: list[TrafficSeries], regions: list[RegionMeta], regions_path, traffic_path) -> None:
    with open(regions_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region_id", "lat", "lon"])
        for r in regions:
            w.writerow([r.region_id, repr(float(r.lat)), repr(float(r.lon))])
    with open(traffic_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region_id", "timestamp", "traffic_mb"])
        for s in series:
            for ts, v in zip(s.timestamps, s.values):
                w.writerow([s.region_id, str(ts.astype("datetime64[s]")), repr(float(v))])


def _rows(path, header: list[str]):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None:
            raise ValidationError(f"{path} is empty")
        if [c.strip() for c in first] != header:
            raise ValidationError(f"{path}: expected header {header}, got {first}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValidationError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            yield lineno, row


def load_csv(regions_path, traffic_path) -> tuple[list[TrafficSeries], list[RegionMeta]]:
    """Read ``regions.csv`` and ``traffic.csv``; series come back in region-file order, time-sorted."""
    regions = []
    for lineno, (rid, lat, lon) in _rows(regions_path, ["region_id", "lat", "lon"]):
        try:
            regions.append(RegionMeta(rid, float(lat), float(lon)))
        except ValueError as exc:
            raise ValidationError(f"{regions_path}:{lineno}: {exc}") from exc
    if len({r.region_id for r in regions}) != len(regions):
        raise ValidationError(f"{regions_path}: duplicate region ids")
    known = {r.region_id for r in regions}
    raw: dict[str, list[tuple[np.datetime64, float]]] = {r.region_id: [] for r in regions}
    for lineno, (rid, ts, val) in _rows(traffic_path, ["region_id", "timestamp", "traffic_mb"]):
        if rid not in known:
            raise ValidationError(f"{traffic_path}:{lineno}: unknown region {rid!r}")
        try:
            raw[rid].append((np.datetime64(ts, "m"), float(val)))
        except ValueError as exc:
            raise ValidationError(f"{traffic_path}:{lineno}: {exc}") from exc
    if not any(raw.values()):
        raise ValidationError(f"{traffic_path} has no traffic rows")
    series = []
    for r in regions:
        rows = sorted(raw[r.region_id], key=lambda x: x[0])
        if len(rows) < 2:
            raise ValidationError(f"region {r.region_id} has fewer than two samples")
        times = np.array([t for t, _ in rows], dtype="datetime64[m]")
        steps = np.diff(times).astype(np.int64)
        step = int(steps.min())
        if step <= 0:
            raise ValidationError(f"region {r.region_id} has duplicate timestamps")
        if np.any(steps % step):
            raise ValidationError(f"region {r.region_id} has a non-uniform sampling interval")
        if np.any(steps != step):
            full = np.arange(times[0], times[-1] + 1, np.timedelta64(step, "m"))
            missing = np.setdiff1d(full, times)
            shown = ", ".join(str(m) for m in missing[:10])
            raise ValidationError(f"region {r.region_id} is missing {len(missing)} timestamps: {shown}")
        series.append(TrafficSeries(r.region_id, times[0], [v for _, v in rows], step))
    _check_aligned(series)
    return series, regions


def _check_aligned(series: list[TrafficSeries]) -> None:
    s0 = series[0]
    for s in series[1:]:
        if s.start_time != s0.start_time or len(s) != len(s0) or s.interval_minutes != s0.interval_minutes:
            raise ValidationError(f"series {s.region_id} is not aligned with {s0.region_id}")


# ------------------------------------------------------------------ windowing
def split_bounds(n_windows: int, horizon: int, split=(0.7, 0.1, 0.2)) -> list[range]:
    """Window-start ranges for train/val/test.

    The first ``horizon`` windows after each boundary are dropped so no target
    of an earlier split falls inside a later split's inputs.
    """
    if len(split) != 3 or min(split) < 0 or abs(sum(split) - 1.0) > 1e-9:
        raise ValidationError(f"split fractions must be three non-negative values summing to 1: {split}")
    b1 = int(round(split[0] * n_windows))
    b2 = int(round((split[0] + split[1]) * n_windows))
    return [range(0, b1), range(min(b1 + horizon, b2), b2), range(min(b2 + horizon, n_windows), n_windows)]


def num_windows(length: int, history: int, horizon: int) -> int:
    return length - history - horizon + 1


def make_windows(series: TrafficSeries, history: int = 96, horizon: int = 4, split=(0.7, 0.1, 0.2)):
    """Stride-1 sliding windows split chronologically into (train, val, test)."""
    n = num_windows(len(series), history, horizon)
    if n < 1:
        raise ValidationError(f"series {series.region_id} has {len(series)} steps; need >= {history + horizon}")
    ts = series.timestamps
    v = series.values
    out = []
    for rng in split_bounds(n, horizon, split):
        out.append([WindowSample(series.region_id, v[s:s + history], v[s + history:s + history + horizon],
                                 ts[s:s + history], s) for s in rng])
    return tuple(out)


# ------------------------------------------------------------------ synthetic
# Diurnal bumps per archetype: (peak hour, relative height, width in hours).
ARCHETYPES = {
    "residential": ((8.0, 0.45, 1.3), (21.0, 1.0, 2.2), (13.0, 0.25, 2.5)),
    "business": ((9.5, 1.0, 1.6), (15.0, 0.7, 2.0), (18.5, 0.45, 1.0)),
    "mixed": ((12.0, 0.6, 3.0), (19.5, 0.8, 2.0), (8.5, 0.35, 1.0)),
}
WEEKEND_FACTOR = {"residential": 1.1, "business": 0.65, "mixed": 0.9}


@dataclass
class SynthConfig:
    n_regions: int = 40
    days: int = 28
    seed: int = 7
    spatial_corr_strength: float = 0.7
    noise_std: float = 0.12
    archetype_weights: dict = field(default_factory=lambda: {"residential": 0.4, "business": 0.35, "mixed": 0.25})
    diurnal_amp: float = 0.55
    latent_amp: float = 0.65
    spatial_scale_km: float = 3.0
    propagation_km_per_step: float = 0.5
    latent_phis: tuple = (0.995, 0.9)
    n_hotspots: int = 0
    lat_range: tuple = (36.60, 36.75)
    lon_range: tuple = (116.90, 117.20)
    start: str = "2024-07-28T00:00"

    def validate(self) -> None:
        if self.days < 7:
            raise ValidationError(f"days must be >= 7 (got {self.days})")
        if self.n_regions < 2:
            raise ValidationError(f"n_regions must be >= 2 (got {self.n_regions})")
        if not 0.0 <= self.spatial_corr_strength <= 1.0:
            raise ValidationError("spatial_corr_strength must lie in [0, 1]")
        if self.noise_std < 0:
            raise ValidationError("noise_std must be non-negative")
        if self.propagation_km_per_step <= 0:
            raise ValidationError("propagation_km_per_step must be positive")


def _profile(hours: np.ndarray, bumps, rng: np.random.Generator, amp: float) -> np.ndarray:
    p = np.zeros_like(hours)
    for centre, height, width in bumps:
        c = centre + rng.uniform(-0.5, 0.5)
        dist = np.abs((hours - c + 12.0) % 24.0 - 12.0)
        p += height * rng.uniform(0.8, 1.2) * np.exp(-0.5 * (dist / width) ** 2)
    return 1.0 + amp * (p - p.mean()) / p.std()


def _ar1(rng: np.random.Generator, phi: float, shape) -> np.ndarray:
    n, t = shape
    eps = rng.normal(size=shape) * np.sqrt(1.0 - phi * phi)
    out = np.empty(shape)
    out[:, 0] = rng.normal(size=n)
    for i in range(1, t):
        out[:, i] = phi * out[:, i - 1] + eps[:, i]
    return out


def generate_synthetic(cfg: SynthConfig) -> tuple[list[TrafficSeries], list[RegionMeta]]:
    """Seeded synthetic city traffic.

    Each region mixes an archetype-specific diurnal profile, a weekend factor,
    a latent fluctuation blended from a spatially smoothed field (weights
    ``exp(-d / spatial_scale_km)``, arriving from region j after
    ``d / propagation_km_per_step`` steps) and an idiosyncratic one, plus
    white noise. With ``n_hotspots > 0`` the smoothed field originates at
    that many random points instead of at the regions themselves.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n, steps = cfg.n_regions, cfg.days * STEPS_PER_DAY
    lats = rng.uniform(*cfg.lat_range, size=n)
    lons = rng.uniform(*cfg.lon_range, size=n)
    width = len(str(n - 1))
    regions = [RegionMeta(f"R{i:0{width}d}", float(round(la, 6)), float(round(lo, 6)))
               for i, (la, lo) in enumerate(zip(lats, lons))]
    names = sorted(cfg.archetype_weights)
    probs = np.array([cfg.archetype_weights[k] for k in names], dtype=float)
    kinds = [names[i] for i in rng.choice(len(names), size=n, p=probs / probs.sum())]
    levels = np.exp(rng.normal(np.log(50.0), 0.5, size=n))

    # shared fluctuations start at hotspots and spread outwards: region i sees
    # hotspot h with weight exp(-d/scale) after d/speed steps
    n_src = cfg.n_hotspots or n
    if cfg.n_hotspots:
        src_lat = rng.uniform(*cfg.lat_range, size=n_src)
        src_lon = rng.uniform(*cfg.lon_range, size=n_src)
    else:
        src_lat, src_lon = lats, lons
    d = haversine_matrix(lats, lons, src_lat, src_lon)
    w = np.exp(-d / cfg.spatial_scale_km)
    w /= np.sqrt((w * w).sum(axis=1, keepdims=True))
    delay = np.rint(d / cfg.propagation_km_per_step).astype(np.int64)
    burn = int(delay.max())

    def latent(rows, length):
        # equal-variance sum of AR(1) components, e.g. slow (about a day) plus fast (hours)
        parts = [_ar1(rng, phi, (rows, length)) for phi in cfg.latent_phis]
        return sum(parts) / np.sqrt(len(parts))

    field_ = latent(n_src, steps + burn)
    shared = np.zeros((n, steps))
    for i in range(n):
        for j in range(n_src):
            shared[i] += w[i, j] * field_[j, burn - delay[i, j]:burn - delay[i, j] + steps]
    own = latent(n, steps)
    s = cfg.spatial_corr_strength
    lat_mix = np.sqrt(s) * shared + np.sqrt(1.0 - s) * own

    t = np.arange(steps)
    hours = (t % STEPS_PER_DAY) * (24.0 / STEPS_PER_DAY)
    start = np.datetime64(cfg.start, "m")
    weekday = ((start + t * np.timedelta64(INTERVAL_MINUTES, "m")).astype("datetime64[D]").astype(np.int64) + 3) % 7
    weekend = weekday >= 5
    series = []
    day_hours = np.arange(STEPS_PER_DAY) * (24.0 / STEPS_PER_DAY)
    for i, r in enumerate(regions):
        prof = _profile(day_hours, ARCHETYPES[kinds[i]], rng, cfg.diurnal_amp)[t % STEPS_PER_DAY]
        week = np.where(weekend, WEEKEND_FACTOR[kinds[i]], 1.0)
        x = week * prof + cfg.latent_amp * lat_mix[i] + cfg.noise_std * rng.normal(size=steps)
        series.append(TrafficSeries(r.region_id, start, np.round(levels[i] * np.maximum(x, 0.0), 6)))
    return series, regions
