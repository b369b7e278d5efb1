"""End-to-end plumbing: scaling, clustering, per-cluster tasks, model fitting and scoring."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict
from types import SimpleNamespace

import numpy as np

from . import revin
from .baselines import DLinear, seasonal_naive
from .data import STEPS_PER_DAY, TrafficSeries, num_windows, split_bounds
from .errors import ValidationError
from .geo import (ClusterAssignment, RegionMeta, SpatialGraph, build_spatial_graph, extract_region_features,
                  isolated_graph, kmeans_cluster)
from .metrics import EvalReport, mae
from .model import ClusterBatch, TidesConfig, TidesParams, forward, prompt_prefix
from .prompt import PromptTokenizer, descriptor_matrix, render_values, tokenize
from .tensor import Tensor, no_grad
from .tod import TodWindows
from .train import TrainConfig, train_cluster

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    history: int = 96
    horizon: int = 4
    split: tuple = (0.7, 0.1, 0.2)
    train_stride: int = 8
    eval_stride: int = 4
    knn: int = 5
    k_clusters: int = 4
    par_mode: str = "literal"

    def __post_init__(self):
        if self.train_stride < 1 or self.eval_stride < 1:
            raise ValidationError("window strides must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PreparedData:
    """Aligned traffic matrix with per-region scaling fitted on the training span."""

    regions: list[RegionMeta]
    raw: np.ndarray                  # (N, T) original units
    start_time: np.datetime64
    interval_minutes: int
    mean: np.ndarray                 # (N,)
    std: np.ndarray                  # (N,)
    starts: dict[str, np.ndarray]    # split name -> window start indices
    history: int
    horizon: int
    train_end: int                   # steps [0, train_end) feed scaling and clustering
    z: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.z = (self.raw - self.mean[:, None]) / self.std[:, None]

    @property
    def region_ids(self) -> list[str]:
        return [r.region_id for r in self.regions]

    @property
    def timestamps(self) -> np.ndarray:
        return self.start_time + np.arange(self.raw.shape[1]) * np.timedelta64(self.interval_minutes, "m")

    def rows(self, region_ids) -> np.ndarray:
        pos = {r: i for i, r in enumerate(self.region_ids)}
        missing = [r for r in region_ids if r not in pos]
        if missing:
            raise ValidationError(f"regions not in dataset: {missing[:5]}")
        return np.array([pos[r] for r in region_ids], dtype=np.int64)

    def to_z(self, values: np.ndarray, rows: np.ndarray) -> np.ndarray:
        """Original units -> normalized; ``values`` has the region axis second, as in (B, R, P)."""
        return (values - self.mean[rows][None, :, None]) / self.std[rows][None, :, None]

    def to_orig(self, values: np.ndarray, rows: np.ndarray) -> np.ndarray:
        return values * self.std[rows][None, :, None] + self.mean[rows][None, :, None]


def prepare(series: list[TrafficSeries], regions: list[RegionMeta], cfg: PipelineConfig) -> PreparedData:
    if [s.region_id for s in series] != [r.region_id for r in regions]:
        raise ValidationError("series and regions must list the same ids in the same order")
    raw = np.stack([s.values for s in series])
    n = num_windows(raw.shape[1], cfg.history, cfg.horizon)
    if n < 3:
        raise ValidationError(f"series of {raw.shape[1]} steps are too short for history {cfg.history}")
    train, val, test = split_bounds(n, cfg.horizon, cfg.split)
    if len(train) == 0 or len(val) == 0 or len(test) == 0:
        raise ValidationError("every split needs at least one window")
    train_end = train.stop - 1 + cfg.history + cfg.horizon
    span = raw[:, :train_end]
    mean = span.mean(axis=1)
    std = span.std(axis=1)
    std = np.where(std > 0, std, 1.0)
    starts = {
        "train": np.arange(train.start, train.stop, cfg.train_stride),
        "val": np.arange(val.start, val.stop, cfg.eval_stride),
        "test": np.arange(test.start, test.stop, cfg.eval_stride),
    }
    return PreparedData(list(regions), raw, series[0].start_time, series[0].interval_minutes, mean, std, starts,
                        cfg.history, cfg.horizon, train_end)


def cluster_regions(data: PreparedData, k_clusters: int, knn: int, seed: int = 0,
                    restarts: int = 10) -> tuple[ClusterAssignment, SpatialGraph, list]:
    """K-means over region descriptors computed on the training span only."""
    graph = build_spatial_graph(data.regions, knn)
    span = data.raw[:, :data.train_end]
    series = [TrafficSeries(r.region_id, data.start_time, span[i], data.interval_minutes)
              for i, r in enumerate(data.regions)]
    means = span.mean(axis=1)
    feats = [extract_region_features(s, graph, means, r) for s, r in zip(series, data.regions)]
    return kmeans_cluster(feats, k_clusters, restarts=restarts, seed=seed), graph, feats


class ClusterTask:
    """Window access for one cluster: normalized inputs, targets and prompt token ids."""

    def __init__(self, data: PreparedData, cluster_id: int, region_ids: list[str], knn: int = 5,
                 tokenizer: PromptTokenizer | None = None, par_mode: str = "literal", prompt_len: int = 64):
        if not region_ids:
            raise ValidationError(f"cluster {cluster_id} has no regions")
        self.data = data
        self.cluster_id = cluster_id
        self.region_ids = list(region_ids)
        self.rows = data.rows(self.region_ids)
        regs = [data.regions[i] for i in self.rows]
        r = len(regs)
        self.graph = build_spatial_graph(regs, min(knn, r - 1)) if r >= 2 else isolated_graph(self.region_ids)
        self.z = data.z[self.rows]
        # prompts describe traffic relative to each region's training mean
        self.rel = data.raw[self.rows] / np.where(data.mean[self.rows] > 0, data.mean[self.rows], 1.0)[:, None]
        self.tokenizer = tokenizer or PromptTokenizer()
        self.par_mode = par_mode
        self.prompt_len = prompt_len
        self.timestamps = data.timestamps
        self._ids: dict[int, np.ndarray] = {}

    @property
    def n_regions(self) -> int:
        return len(self.region_ids)

    def _gather(self, arr: np.ndarray, starts, offset: int, length: int) -> np.ndarray:
        idx = np.asarray(starts)[:, None] + offset + np.arange(length)[None, :]
        return np.ascontiguousarray(arr[:, idx].transpose(1, 0, 2))         # (B, R, length)

    def windows(self, starts) -> np.ndarray:
        return self._gather(self.z, starts, 0, self.data.history)

    def targets(self, starts) -> np.ndarray:
        return self._gather(self.z, starts, self.data.history, self.data.horizon)

    def prompt_ids(self, starts) -> np.ndarray:
        starts = [int(s) for s in starts]
        todo = [s for s in starts if s not in self._ids]
        if todo:
            h = self.data.history
            win = self._gather(self.rel, todo, 0, h).reshape(-1, h)
            tod = TodWindows()
            per_start = [tod.masks(self.timestamps[s:s + h]) for s in todo]
            masks = {k: np.repeat(np.stack([m[k] for m in per_start]), self.n_regions, axis=0)
                     for k in per_start[0]}
            vals = descriptor_matrix(win, masks, par_mode=self.par_mode).reshape(len(todo), self.n_regions, -1)
            for s, rows in zip(todo, vals):
                self._ids[s] = np.array([tokenize(render_values(rid, row, self.data.horizon), self.tokenizer,
                                                  self.prompt_len)
                                         for rid, row in zip(self.region_ids, rows)], dtype=np.int64)
        return np.stack([self._ids[s] for s in starts])

    def prompt_texts(self, start: int) -> list[str]:
        return [self.tokenizer.decode(ids) for ids in self.prompt_ids([start])[0]]


# ------------------------------------------------------------------- models
class TidesModel:
    name = "tides"

    def __init__(self, task: ClusterTask, cfg: TidesConfig | None = None, seed: int = 0, isolate: bool = False,
                 params: TidesParams | None = None, loss_space: str = "revin"):
        self.task = task
        self.cfg = cfg or TidesConfig(history=task.data.history, horizon=task.data.horizon,
                                      prompt_max_len=task.prompt_len, vocab_size=len(task.tokenizer))
        self.params = params or TidesParams(self.cfg, seed)
        self.store = self.params.store
        self.isolate = isolate
        self.mask = isolated_graph(task.region_ids).mask if isolate else task.graph.mask
        self._prefix: dict[int, list] = {}
        self.loss_space = loss_space

    def _prefix_for(self, starts) -> list[tuple]:
        todo = [int(s) for s in starts if int(s) not in self._prefix]
        for i in range(0, len(todo), 32):
            chunk = todo[i:i + 32]
            ids = self.task.prompt_ids(chunk).reshape(-1, self.cfg.prompt_max_len)
            cache = prompt_prefix(ids, self.params)
            r = self.task.n_regions
            for j, s in enumerate(chunk):
                self._prefix[s] = [(k[j * r:(j + 1) * r], v[j * r:(j + 1) * r]) for k, v in cache]
        per = [self._prefix[int(s)] for s in starts]
        return [(np.concatenate([p[l][0] for p in per]), np.concatenate([p[l][1] for p in per]))
                for l in range(len(per[0]))]

    def batch(self, starts, with_targets: bool = True) -> ClusterBatch:
        t = self.task
        zn, mu, sd = revin.normalize_batch(t.windows(starts))
        tgt = None
        if with_targets:
            tgt = (t.targets(starts) - mu[..., None]) / sd[..., None]
        return ClusterBatch(t.cluster_id, t.region_ids, zn, mu, sd, t.graph, t.prompt_ids(starts), tgt,
                            keys=list(starts), prefix=self._prefix_for(starts))

    def loss(self, batch: ClusterBatch) -> Tensor:
        diff = forward(batch, self.params, self.mask) - batch.targets
        if self.loss_space == "series":
            diff = diff * np.broadcast_to(batch.revin_std[..., None], diff.shape).copy()
        return (diff * diff).mean()

    def predict_z(self, starts, chunk: int = 32) -> np.ndarray:
        out = []
        with no_grad():
            for i in range(0, len(starts), chunk):
                b = self.batch(starts[i:i + chunk], with_targets=False)
                y = forward(b, self.params, self.mask).data
                out.append(revin.denormalize_batch(y, b.revin_mean, b.revin_std))
        return np.concatenate(out)


class DLinearModel:
    name = "dlinear"

    def __init__(self, task: ClusterTask, seed: int = 0, kernel: int = 25):
        self.task = task
        self.net = DLinear(task.data.history, task.data.horizon, kernel, seed)
        self.store = self.net.store

    def batch(self, starts, with_targets: bool = True):
        return SimpleNamespace(windows=self.task.windows(starts),
                               targets=self.task.targets(starts) if with_targets else None)

    def loss(self, batch) -> Tensor:
        return self.net.loss(batch)

    def predict_z(self, starts, chunk: int = 256) -> np.ndarray:
        return np.concatenate([self.net.predict(self.batch(starts[i:i + chunk], False))
                               for i in range(0, len(starts), chunk)])


class SeasonalNaiveModel:
    name = "seasonal_naive"

    def __init__(self, task: ClusterTask, period: int = STEPS_PER_DAY):
        self.task = task
        self.period = period

    def predict_z(self, starts) -> np.ndarray:
        return seasonal_naive(self.task.windows(starts), self.period, self.task.data.horizon)


def fit(model, tcfg: TrainConfig, on_epoch=None) -> list[dict]:
    """Train ``model`` on its task's training windows, early-stopping on validation MAE."""
    task = model.task
    train = task.data.starts["train"]
    val = task.data.starts["val"]
    val_true = task.targets(val)
    steps = -(-len(train) // tcfg.batch_size)

    def batches(rng):
        order = train[rng.permutation(len(train))]
        for i in range(0, len(order), tcfg.batch_size):
            yield model.batch(order[i:i + tcfg.batch_size])

    def validate():
        return mae(val_true, model.predict_z(val))

    _, history = train_cluster(model, batches, steps, validate, tcfg, on_epoch)
    return history


# ------------------------------------------------------------------ scoring
@dataclass
class Forecast:
    """Predictions for one split of one set of regions, original units, shape (B, R, P)."""

    region_ids: list[str]
    starts: np.ndarray
    y_true: np.ndarray
    y_pred: np.ndarray


def forecast(model, split: str = "test") -> Forecast:
    task = model.task
    starts = task.data.starts[split]
    pred = task.data.to_orig(model.predict_z(starts), task.rows)
    true = task.data.raw[task.rows][:, starts[:, None] + task.data.history + np.arange(task.data.horizon)]
    return Forecast(task.region_ids, starts, true.transpose(1, 0, 2), pred)


def merge_forecasts(parts: list[Forecast]) -> Forecast:
    """Concatenate cluster forecasts along the region axis; starts must agree."""
    for p in parts[1:]:
        if not np.array_equal(p.starts, parts[0].starts):
            raise ValidationError("forecasts cover different windows")
    return Forecast(sum((p.region_ids for p in parts), []), parts[0].starts,
                    np.concatenate([p.y_true for p in parts], axis=1),
                    np.concatenate([p.y_pred for p in parts], axis=1))


def score(fc: Forecast, data: PreparedData, model_name: str, meta: dict | None = None) -> EvalReport:
    """Metrics on the normalized scale of ``data``; MAPE in original units."""
    rows = data.rows(fc.region_ids)
    return EvalReport(model_name, list(fc.region_ids), data.to_z(fc.y_true, rows), data.to_z(fc.y_pred, rows),
                      fc.y_true, fc.y_pred, dict(meta or {}))


def prediction_rows(fc: Forecast, data: PreparedData):
    """(region_id, timestamp, horizon, y_true, y_pred) rows of a forecast."""
    ts = data.timestamps
    h = data.history
    for b, s in enumerate(fc.starts):
        for r, rid in enumerate(fc.region_ids):
            for k in range(fc.y_true.shape[2]):
                yield rid, str(ts[s + h + k].astype("datetime64[s]")), k + 1, fc.y_true[b, r, k], fc.y_pred[b, r, k]
