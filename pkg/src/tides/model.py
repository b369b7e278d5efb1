"""The per-cluster TIDES predictor.

Data path for one region at one time step::

    window -> patches -> patch tokens -> spatial attention over the cluster
           -> cross-attention onto the projected vocabulary
           -> [prompt tokens ; aligned patch tokens] -> frozen decoder stack
           -> last patch positions -> linear head -> P normalized forecasts
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .attention import (AttentionConfig, DecoderBlockParams, EmbeddingTable, MASK_VALUE, embed,
                        prefix_cache, run_stack, _attend_heads, _merge_heads, _split_heads)
from .errors import ValidationError
from .geo import SpatialGraph
from .params import ParamStore, xavier_uniform
from .tensor import Tensor, no_grad


@dataclass(frozen=True)
class TidesConfig:
    history: int = 96
    horizon: int = 4
    d_model: int = 16
    n_heads: int = 8
    patch_len: int = 16
    stride: int = 8
    backbone_layers: int = 4
    prompt_max_len: int = 64
    e_low_dim: int = 16
    mask_value: float = MASK_VALUE
    vocab_size: int = 385

    def __post_init__(self):
        if self.history < self.patch_len:
            raise ValidationError(f"history {self.history} is shorter than patch_len {self.patch_len}")
        if self.d_model % self.n_heads:
            raise ValidationError("d_model must be divisible by n_heads")
        if self.stride < 1:
            raise ValidationError("stride must be positive")

    @property
    def num_patches(self) -> int:
        return (self.history - self.patch_len) // self.stride + 1

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    def backbone_attention(self) -> AttentionConfig:
        return AttentionConfig(self.d_model, self.n_heads, mode="MQA", causal=True)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ClusterBatch:
    """Inputs for one or more time steps of one cluster.

    Arrays carry a leading batch axis B (time steps), then the region axis in
    graph order.
    """

    cluster_id: int
    region_ids: list[str]
    windows: np.ndarray            # (B, R, H), RevIN-normalized
    revin_mean: np.ndarray         # (B, R)
    revin_std: np.ndarray          # (B, R)
    graph: SpatialGraph
    prompt_ids: np.ndarray         # (B, R, prompt_max_len)
    targets: np.ndarray | None = None   # (B, R, P), same normalization as windows
    keys: list = field(default_factory=list)
    prefix: list | None = None          # cached prompt keys/values, see prompt_prefix

    def __post_init__(self):
        if self.graph.region_ids != list(self.region_ids):
            raise ValidationError("graph node order must match region_ids")
        if self.windows.ndim != 3 or self.windows.shape[1] != len(self.region_ids):
            raise ValidationError(f"windows must be (B, R, H); got {self.windows.shape}")

    @property
    def n_regions(self) -> int:
        return len(self.region_ids)


class TidesParams:
    """Parameter layout; frozen = backbone blocks and the embedding table."""

    def __init__(self, cfg: TidesConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        s = self.store = ParamStore()
        d, pl, dl = cfg.d_model, cfg.patch_len, cfg.e_low_dim
        self.embedding = EmbeddingTable.create(s, cfg.vocab_size, cfg.prompt_max_len + cfg.num_patches, d, rng)
        acfg = cfg.backbone_attention()
        self.blocks = [DecoderBlockParams.create(s, f"backbone.{i}", acfg, rng, frozen=True)
                       for i in range(cfg.backbone_layers)]
        self.patch_w = s.add("patch.w", xavier_uniform(rng, pl, d))
        self.patch_b = s.add("patch.b", np.zeros(d))
        self.sa_q = s.add("sa.w_q", xavier_uniform(rng, d, d))
        self.sa_k = s.add("sa.w_k", xavier_uniform(rng, d, d))
        self.sa_v = s.add("sa.w_v", xavier_uniform(rng, d, d))
        self.low_w = s.add("low.w", xavier_uniform(rng, d, dl))
        self.low_b = s.add("low.b", np.zeros(dl))
        self.da_q = s.add("da.w_q", xavier_uniform(rng, d, d))
        self.da_k = s.add("da.w_k", xavier_uniform(rng, dl, d))
        self.da_v = s.add("da.w_v", xavier_uniform(rng, dl, d))
        self.out_w = s.add("out.w", xavier_uniform(rng, cfg.num_patches * d, cfg.horizon))
        self.out_b = s.add("out.b", np.zeros(cfg.horizon))


def make_patches(windows: np.ndarray, patch_len: int, stride: int) -> np.ndarray:
    w = np.asarray(windows, dtype=np.float64)
    if w.shape[-1] < patch_len:
        raise ValidationError(f"window length {w.shape[-1]} is shorter than patch_len {patch_len}")
    view = np.lib.stride_tricks.sliding_window_view(w, patch_len, axis=-1)
    return np.ascontiguousarray(view[..., ::stride, :])


def patch_embed(windows, params: TidesParams) -> Tensor:
    """Overlapping patches projected to d_model: (..., H) -> (..., num_patches, d_model)."""
    cfg = params.cfg
    return Tensor(make_patches(windows, cfg.patch_len, cfg.stride)) @ params.patch_w + params.patch_b


def spatial_attention(tokens: Tensor, mask: np.ndarray, params: TidesParams) -> Tensor:
    """Masked multi-head attention across the region axis, independently per patch.

    ``tokens`` is (..., R, num_patches, d_model); ``mask`` is the (R, R)
    additive mask of the cluster graph.
    """
    cfg = params.cfg
    r = tokens.shape[-3]
    mask = np.asarray(mask, dtype=float)
    if mask.shape != (r, r):
        raise ValidationError(f"graph has {mask.shape[0]} nodes but batch has {r} regions")
    x = tokens.swapaxes(-2, -3)                                  # (..., np, R, d)
    q = _split_heads((x @ params.sa_q) * (1.0 / np.sqrt(cfg.d_k)), cfg.n_heads)   # (..., np, h, R, dk)
    k = _split_heads(x @ params.sa_k, cfg.n_heads)
    v = _split_heads(x @ params.sa_v, cfg.n_heads)
    out = _merge_heads(_attend_heads(q, k, v, mask))              # (..., np, R, d)
    return out.swapaxes(-2, -3)


def low_rank_vocab(params: TidesParams) -> Tensor:
    return params.embedding.E @ params.low_w + params.low_b


def domain_align(h_sa: Tensor, e_low: Tensor, params: TidesParams) -> Tensor:
    """Multi-head cross-attention from patch tokens onto the projected vocabulary."""
    cfg = params.cfg
    h, dk = cfg.n_heads, cfg.d_k
    vocab = e_low.shape[0]
    q = _split_heads((h_sa @ params.da_q) * (1.0 / np.sqrt(dk)), h)      # (..., h, np, dk)
    k = (e_low @ params.da_k).reshape((vocab, h, dk)).swapaxes(0, 1)         # (h, V, dk)
    v = (e_low @ params.da_v).reshape((vocab, h, dk)).swapaxes(0, 1)
    return _merge_heads(_attend_heads(q, k, v))


def _aligned_tokens(batch: ClusterBatch, params: TidesParams, mask: np.ndarray | None) -> Tensor:
    cfg = params.cfg
    tok = patch_embed(batch.windows, params)
    h_sa = spatial_attention(tok, batch.graph.mask if mask is None else mask, params)
    h_da = domain_align(h_sa, low_rank_vocab(params), params)
    lp = cfg.prompt_max_len
    pos = T.getitem(params.embedding.P, slice(lp, lp + cfg.num_patches))
    return h_da + pos


def prompt_prefix(prompt_ids: np.ndarray, params: TidesParams) -> list[tuple]:
    """Backbone keys/values for embedded prompts of shape (N, prompt_max_len)."""
    cfg = params.cfg
    with no_grad():
        h0 = embed(prompt_ids, params.embedding).data
    return prefix_cache(h0, params.blocks, cfg.backbone_attention())


def forward(batch: ClusterBatch, params: TidesParams, mask: np.ndarray | None = None,
            prefix: list[tuple] | None = None) -> Tensor:
    """Normalized forecasts of shape (B, R, P).

    The prompt occupies the first ``prompt_max_len`` backbone positions and
    never depends on trainable weights, so its per-layer keys and values are
    computed once without a tape and reused by the patch positions.
    """
    cfg = params.cfg
    b, r = batch.windows.shape[:2]
    n = b * r
    suffix = _aligned_tokens(batch, params, mask).reshape((n, cfg.num_patches, cfg.d_model))
    if prefix is None:
        prefix = batch.prefix
    if prefix is None:
        ids = _check_prompt(batch.prompt_ids, cfg).reshape(n, cfg.prompt_max_len)
        prefix = prompt_prefix(ids, params)
    hidden = run_stack(suffix, params.blocks, cfg.backbone_attention(), past=prefix)
    flat = hidden.reshape((b, r, cfg.num_patches * cfg.d_model))
    return flat @ params.out_w + params.out_b


def forward_full(batch: ClusterBatch, params: TidesParams, mask: np.ndarray | None = None) -> Tensor:
    """Same as :func:`forward` but runs the backbone over the full concatenated sequence."""
    cfg = params.cfg
    b, r = batch.windows.shape[:2]
    n = b * r
    suffix = _aligned_tokens(batch, params, mask).reshape((n, cfg.num_patches, cfg.d_model))
    ids = _check_prompt(batch.prompt_ids, cfg).reshape(n, cfg.prompt_max_len)
    seq = T.concat([embed(ids, params.embedding), suffix], axis=1)
    hidden = run_stack(seq, params.blocks, cfg.backbone_attention())
    tail = T.getitem(hidden, (slice(None), slice(cfg.prompt_max_len, None)))
    return tail.reshape((b, r, cfg.num_patches * cfg.d_model)) @ params.out_w + params.out_b


def _check_prompt(ids: np.ndarray, cfg: TidesConfig) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape[-1] > cfg.prompt_max_len:
        ids = ids[..., :cfg.prompt_max_len]
    elif ids.shape[-1] < cfg.prompt_max_len:
        raise ValidationError(f"prompt ids must be padded to {cfg.prompt_max_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValidationError("prompt token id out of vocabulary range")
    return ids
