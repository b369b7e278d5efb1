"""Spatial-aware region clustering.

Regions are described by location, time-of-day traffic levels and their
local Moran's I over a k-nearest-neighbour inverse-distance graph, then
grouped with z-scored K-means.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .tod import TodWindows

log = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0
MIN_DISTANCE_KM = 1e-3  # co-located regions are treated as 1 m apart
MASK_VALUE = -1e9
EXHAUSTIVE_SEEDS = 256

FEATURE_NAMES = ("phi", "lambda", "mean_traffic", "am", "pm", "night", "moran_i")


@dataclass(frozen=True)
class RegionMeta:
    region_id: str
    lat: float
    lon: float

    def __post_init__(self):
        _check_coords(self.lat, self.lon)


def _check_coords(lat, lon):
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    if not (np.all(np.isfinite(lat)) and np.all(np.isfinite(lon))):
        raise ValidationError("coordinates must be finite")
    if np.any(np.abs(lat) > 90.0) or np.any(np.abs(lon) > 180.0):
        raise ValidationError(f"coordinates out of range: lat={lat}, lon={lon}")


def haversine_km(a: RegionMeta, b: RegionMeta, radius_km: float = EARTH_RADIUS_KM) -> float:
    if radius_km <= 0:
        raise ValidationError("radius_km must be positive")
    return float(haversine_matrix([a.lat], [a.lon], [b.lat], [b.lon], radius_km)[0, 0])


def haversine_matrix(lat1, lon1, lat2=None, lon2=None, radius_km: float = EARTH_RADIUS_KM) -> np.ndarray:
    """Pairwise great-circle distances (km) between two coordinate lists."""
    if lat2 is None:
        lat2, lon2 = lat1, lon1
    _check_coords(lat1, lon1)
    _check_coords(lat2, lon2)
    p1 = np.radians(np.asarray(lat1, dtype=float))[:, None]
    l1 = np.radians(np.asarray(lon1, dtype=float))[:, None]
    p2 = np.radians(np.asarray(lat2, dtype=float))[None, :]
    l2 = np.radians(np.asarray(lon2, dtype=float))[None, :]
    h = np.sin((p2 - p1) / 2.0) ** 2 + np.cos(p1) * np.cos(p2) * np.sin((l2 - l1) / 2.0) ** 2
    return 2.0 * radius_km * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


@dataclass
class SpatialGraph:
    region_ids: list[str]
    k: int
    adjacency: np.ndarray
    degree: np.ndarray
    laplacian_sym: np.ndarray
    mask: np.ndarray

    @property
    def n(self) -> int:
        return len(self.region_ids)

    def index(self, region_id: str) -> int:
        return self.region_ids.index(region_id)

    def subgraph(self, region_ids) -> "SpatialGraph":
        idx = [self.index(r) for r in region_ids]
        return graph_from_adjacency(list(region_ids), self.adjacency[np.ix_(idx, idx)], self.k)


def graph_from_adjacency(region_ids: list[str], adjacency: np.ndarray, k: int = 0) -> SpatialGraph:
    """Degree, symmetric normalized Laplacian and additive mask for a weight matrix."""
    a = np.array(adjacency, dtype=float)
    np.fill_diagonal(a, 0.0)
    deg = a.sum(axis=1)
    with np.errstate(divide="ignore"):
        inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(deg), 0.0)
    # isolated nodes keep an identity row in L_sym
    lap = np.eye(len(a)) - inv_sqrt[:, None] * a * inv_sqrt[None, :]
    mask = np.where((a > 0) | np.eye(len(a), dtype=bool), 0.0, MASK_VALUE)
    return SpatialGraph(list(region_ids), k, a, np.diag(deg), lap, mask)


def isolated_graph(region_ids) -> SpatialGraph:
    """Graph with no edges: every region attends only to itself."""
    n = len(region_ids)
    return graph_from_adjacency(list(region_ids), np.zeros((n, n)), 0)


def build_spatial_graph(regions: list[RegionMeta], k: int) -> SpatialGraph:
    """k-NN inverse-distance graph, symmetrized by elementwise max.

    Neighbours are ranked by (distance, region_id) so ties resolve the same
    way on every run.
    """
    n = len(regions)
    if n < 2:
        raise ValidationError("need at least two regions for a spatial graph")
    if not 1 <= k < n:
        raise ValidationError(f"k must satisfy 1 <= k < n (k={k}, n={n})")
    ids = [r.region_id for r in regions]
    if len(set(ids)) != n:
        raise ValidationError("region ids must be unique")
    d = haversine_matrix([r.lat for r in regions], [r.lon for r in regions])
    a = np.zeros((n, n))
    for i in range(n):
        order = sorted((j for j in range(n) if j != i), key=lambda j: (d[i, j], ids[j]))
        for j in order[:k]:
            a[i, j] = 1.0 / max(d[i, j], MIN_DISTANCE_KM)
    return graph_from_adjacency(ids, np.maximum(a, a.T), k)


def local_morans_i(values, graph: SpatialGraph) -> np.ndarray:
    """Local Moran's I, ``I_i = z_i * sum_j a_ij z_j`` with population z-scores."""
    x = np.asarray(values, dtype=float)
    if x.shape != (graph.n,):
        raise ValidationError(f"expected {graph.n} values, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("values must be finite")
    sd = x.std()
    z = (x - x.mean()) / sd if sd > 0 else np.zeros_like(x)
    return z * (graph.adjacency @ z)


@dataclass
class RegionFeatureVector:
    region_id: str
    phi: float
    lam: float
    mean_traffic: float
    am: float
    pm: float
    night: float
    moran_i: float
    notes: tuple[str, ...] = ()

    def as_array(self) -> np.ndarray:
        return np.array([self.phi, self.lam, self.mean_traffic, self.am, self.pm, self.night, self.moran_i])


def extract_region_features(series, graph: SpatialGraph, all_means, coords: RegionMeta,
                            tod: TodWindows | None = None) -> RegionFeatureVector:
    """Clustering descriptor for one region.

    ``all_means`` holds every graph region's mean traffic in graph order and
    feeds the Moran's I statistic.
    """
    tod = tod or TodWindows()
    values = np.asarray(series.values, dtype=float)
    if len(values) * series.interval_minutes < 1440:
        raise ValidationError(f"series for {series.region_id} covers less than one day")
    idx = graph.index(series.region_id)
    masks = tod.masks(series.timestamps)
    notes = []
    levels = {}
    for name in ("am", "pm", "night"):
        sel = values[masks[name]]
        if sel.size == 0:
            notes.append(f"empty {name} window")
            log.warning("region %s: empty %s window, feature set to 0", series.region_id, name)
            levels[name] = 0.0
        else:
            levels[name] = float(sel.mean())
    moran = local_morans_i(all_means, graph)[idx]
    return RegionFeatureVector(series.region_id, coords.lat, coords.lon, float(values.mean()),
                               levels["am"], levels["pm"], levels["night"], float(moran), tuple(notes))


@dataclass
class ClusterAssignment:
    region_ids: list[str]
    labels: np.ndarray
    centroids: np.ndarray
    objective: float
    scaler_mean: np.ndarray
    scaler_std: np.ndarray
    history: list[float] = field(default_factory=list)

    @property
    def K(self) -> int:
        return len(self.centroids)

    def label_of(self) -> dict[str, int]:
        return {r: int(c) for r, c in zip(self.region_ids, self.labels)}

    def members(self, cluster: int) -> list[str]:
        return [r for r, c in zip(self.region_ids, self.labels) if c == cluster]


def wcss(points: np.ndarray, labels: np.ndarray, centroids: np.ndarray) -> float:
    return float(((points - centroids[labels]) ** 2).sum())


def _kmeanspp(points: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(n))]
    d2 = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        nxt = int(rng.integers(n)) if total <= 0 else int(rng.choice(n, p=d2 / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((points - points[nxt]) ** 2).sum(axis=1))
    return points[chosen].copy()


def _lloyd(points: np.ndarray, centroids: np.ndarray, max_iter: int):
    K = len(centroids)
    labels = None
    history = []
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new = d2.argmin(axis=1)
        for c in range(K):
            if not np.any(new == c):
                # move the worst-served point into the empty cluster
                far = int(np.argmax(d2[np.arange(len(points)), new]))
                new[far] = c
        centroids = np.stack([points[new == c].mean(axis=0) for c in range(K)])
        history.append(wcss(points, new, centroids))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
    return labels if labels is not None else new, centroids, history


def _hartigan(points: np.ndarray, labels: np.ndarray, K: int, history: list[float]):
    """Single-point moves that lower the objective, applied until none is left.

    Moving x from cluster a (size n_a) to b changes the objective by
    ``n_b/(n_b+1)|x-mu_b|^2 - n_a/(n_a-1)|x-mu_a|^2``. Lloyd fixed points can
    still admit such moves; the converse never holds.
    """
    labels = labels.copy()
    improved = True
    while improved:
        improved = False
        for i, x in enumerate(points):
            a = labels[i]
            n_a = int(np.sum(labels == a))
            if n_a == 1:
                continue
            cents = np.stack([points[labels == c].mean(axis=0) for c in range(K)])
            sizes = np.bincount(labels, minlength=K)
            d2 = ((cents - x) ** 2).sum(axis=1)
            gain = sizes / (sizes + 1.0) * d2
            gain[a] = np.inf
            b = int(np.argmin(gain))
            if gain[b] < n_a / (n_a - 1.0) * d2[a] - 1e-12:
                labels[i] = b
                improved = True
        if improved:
            cents = np.stack([points[labels == c].mean(axis=0) for c in range(K)])
            history.append(wcss(points, labels, cents))
    cents = np.stack([points[labels == c].mean(axis=0) for c in range(K)])
    return labels, cents


def kmeans_cluster(features: list[RegionFeatureVector], K: int, restarts: int = 10,
                   max_iter: int = 100, seed: int = 0) -> ClusterAssignment:
    """Best-of-``restarts`` k-means on z-scored features.

    Each restart seeds with k-means++, runs Lloyd iterations, then polishes
    with Hartigan single-point moves.
    """
    n = len(features)
    if not 1 <= K <= n:
        raise ValidationError(f"need 1 <= K <= n (K={K}, n={n})")
    raw = np.stack([f.as_array() for f in features])
    if not np.all(np.isfinite(raw)):
        raise ValidationError("feature vectors must be finite")
    mu = raw.mean(axis=0)
    sd = raw.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    pts = (raw - mu) / sd
    rng = np.random.default_rng(seed)
    seeds = [_kmeanspp(pts, K, rng) for _ in range(max(1, restarts))]
    if math.comb(n, K) <= EXHAUSTIVE_SEEDS:
        # small instances: also start from every K-subset of points
        seeds += [pts[list(c)].copy() for c in itertools.combinations(range(n), K)]
    best = None
    for init in seeds:
        labels, cents, hist = _lloyd(pts, init, max_iter)
        labels, cents = _hartigan(pts, labels, K, hist)
        obj = wcss(pts, labels, cents)
        if best is None or obj < best[0] - 1e-12:
            best = (obj, labels, cents, hist)
    obj, labels, cents, hist = best
    return ClusterAssignment([f.region_id for f in features], labels, cents, obj, mu, sd, hist)
