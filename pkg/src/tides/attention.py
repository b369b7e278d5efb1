"""Decoder building blocks: multi-head and multi-query attention, FFN, pre-norm block, embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ValidationError
from .params import ParamStore, xavier_uniform
from .tensor import Tensor, no_grad

MASK_VALUE = -1e9
LN_EPS = 1e-5


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    n_heads: int
    mode: str = "MHA"
    causal: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.mode not in ("MHA", "MQA"):
            raise ValueError(f"unknown attention mode {self.mode!r}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class DecoderBlockParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    w_1: Tensor
    w_2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    frozen: bool = False

    @classmethod
    def create(cls, store: ParamStore, prefix: str, cfg: AttentionConfig, rng: np.random.Generator,
               frozen: bool = False, residual_scale: float = 1.0) -> "DecoderBlockParams":
        """Xavier-uniform weights; ``residual_scale`` shrinks the two residual-branch outputs."""
        d = cfg.d_model
        kv = d if cfg.mode == "MHA" else cfg.d_k

        def w(name, fi, fo, scale=1.0):
            return store.add(f"{prefix}.{name}", scale * xavier_uniform(rng, fi, fo), frozen=frozen)

        return cls(
            w_q=w("w_q", d, d), w_k=w("w_k", d, kv), w_v=w("w_v", d, kv), w_o=w("w_o", d, d, residual_scale),
            w_1=w("w_1", d, 4 * d), w_2=w("w_2", 4 * d, d, residual_scale),
            ln1_gain=store.add(f"{prefix}.ln1_gain", np.ones(d), frozen=frozen),
            ln1_bias=store.add(f"{prefix}.ln1_bias", np.zeros(d), frozen=frozen),
            ln2_gain=store.add(f"{prefix}.ln2_gain", np.ones(d), frozen=frozen),
            ln2_bias=store.add(f"{prefix}.ln2_bias", np.zeros(d), frozen=frozen),
            frozen=frozen,
        )


def causal_mask(t_query: int, t_key: int) -> np.ndarray:
    """Additive mask; query i sits at absolute position ``t_key - t_query + i``."""
    offset = t_key - t_query
    q = np.arange(t_query)[:, None] + offset
    k = np.arange(t_key)[None, :]
    return np.where(k > q, MASK_VALUE, 0.0)


def _split_heads(x: Tensor, h: int) -> Tensor:
    # (..., T, h*dk) -> (..., h, T, dk)
    lead = x.shape[:-1]
    return x.reshape(lead + (h, x.shape[-1] // h)).swapaxes(-2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    # (..., h, T, dk) -> (..., T, h*dk)
    x = x.swapaxes(-2, -3)
    return x.reshape(x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


def combined_mask(tq: int, tk: int, causal: bool, extra_mask=None) -> np.ndarray | None:
    """Sum of the causal mask and an optional (tq, tk) additive mask."""
    m = causal_mask(tq, tk) if causal else None
    if extra_mask is not None:
        e = np.asarray(extra_mask.data if isinstance(extra_mask, Tensor) else extra_mask, dtype=float)
        if e.shape != (tq, tk):
            raise T.DimensionError(f"mask shape {e.shape} does not match attention logits ({tq}, {tk})")
        m = e if m is None else m + e
    return m


def attention_weights(q: np.ndarray, k: np.ndarray, mask=None) -> np.ndarray:
    """Softmax weights for pre-scaled queries; diagnostics only, no gradient."""
    logits = q @ np.swapaxes(k, -1, -2)
    if mask is not None:
        logits = logits + mask
    with no_grad():
        return T.softmax_rows(Tensor(logits)).data


def _attend_heads(q: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
    logits = q @ k.swapaxes(-1, -2)
    if mask is not None:
        logits = logits + mask
    return T.softmax_rows(logits) @ v


def mha(x: Tensor, params: DecoderBlockParams, cfg: AttentionConfig, extra_mask=None, past=None,
        return_weights: bool = False):
    """Multi-head self-attention over the second-to-last axis of ``x``.

    ``past`` optionally holds constant (K, V) arrays for earlier positions,
    shaped (..., h, T_past, d_k); queries then sit after them in time.
    """
    if cfg.mode != "MHA":
        raise ValueError("mha called with an MQA config")
    h = cfg.n_heads
    q = _split_heads((x @ params.w_q) * (1.0 / np.sqrt(cfg.d_k)), h)
    k = _split_heads(x @ params.w_k, h)
    v = _split_heads(x @ params.w_v, h)
    if past is not None:
        k = T.concat([Tensor(past[0]), k], axis=-2)
        v = T.concat([Tensor(past[1]), v], axis=-2)
    mask = combined_mask(q.shape[-2], k.shape[-2], cfg.causal, extra_mask)
    out = _merge_heads(_attend_heads(q, k, v, mask)) @ params.w_o
    return (out, attention_weights(q.data, k.data, mask)) if return_weights else out


def mqa(x: Tensor, params: DecoderBlockParams, cfg: AttentionConfig, extra_mask=None, past=None,
        return_weights: bool = False):
    """Multi-query attention: per-head queries against one shared K and V.

    ``past`` holds constant (K, V) arrays shaped (..., T_past, d_k).
    """
    if cfg.mode != "MQA":
        raise ValueError("mqa called with an MHA config")
    h, dk = cfg.n_heads, cfg.d_k
    tq = x.shape[-2]
    lead = x.shape[:-2]
    q = _split_heads((x @ params.w_q) * (1.0 / np.sqrt(dk)), h)   # (..., h, T, dk)
    q = q.reshape(lead + (h * tq, dk))                     # stack heads along the query axis
    k = x @ params.w_k                                     # (..., T, dk)
    v = x @ params.w_v
    if past is not None:
        k = T.concat([Tensor(past[0]), k], axis=-2)
        v = T.concat([Tensor(past[1]), v], axis=-2)
    tk = k.shape[-2]
    mask = combined_mask(tq, tk, cfg.causal, extra_mask)
    stacked = None if mask is None else np.tile(mask, (h, 1))
    heads = _attend_heads(q, k, v, stacked).reshape(lead + (h, tq, dk))
    out = _merge_heads(heads) @ params.w_o
    if return_weights:
        return out, attention_weights(q.data, k.data, stacked).reshape(lead + (h, tq, tk))
    return out


def attend(x, params, cfg, extra_mask=None, past=None):
    fn = mha if cfg.mode == "MHA" else mqa
    return fn(x, params, cfg, extra_mask=extra_mask, past=past)


def ffn(z: Tensor, params: DecoderBlockParams) -> Tensor:
    return T.gelu(z @ params.w_1) @ params.w_2


def decoder_block(x: Tensor, params: DecoderBlockParams, cfg: AttentionConfig, extra_mask=None,
                  past=None) -> Tensor:
    """Pre-norm block: ``z = x + Attn(LN1(x))``, ``out = z + FFN(LN2(z))``."""
    z = x + attend(T.layer_norm(x, params.ln1_gain, params.ln1_bias, LN_EPS), params, cfg, extra_mask, past)
    return z + ffn(T.layer_norm(z, params.ln2_gain, params.ln2_bias, LN_EPS), params)


def block_kv(x: np.ndarray, params: DecoderBlockParams, cfg: AttentionConfig) -> tuple[np.ndarray, np.ndarray]:
    """Keys and values one block would compute for hidden states ``x`` (no tape)."""
    with no_grad():
        hx = T.layer_norm(Tensor(x), params.ln1_gain, params.ln1_bias, LN_EPS)
        k, v = hx @ params.w_k, hx @ params.w_v
        if cfg.mode == "MHA":
            k, v = _split_heads(k, cfg.n_heads), _split_heads(v, cfg.n_heads)
    return k.data, v.data


def prefix_cache(h0: np.ndarray, blocks: list[DecoderBlockParams], cfg: AttentionConfig) -> list[tuple]:
    """Per-layer (K, V) of a causal prefix that depends on no trainable parameter.

    Later positions attend to these exactly as they would in a full forward
    pass over the concatenated sequence.
    """
    cache = []
    h = h0
    with no_grad():
        for blk in blocks:
            cache.append(block_kv(h, blk, cfg))
            h = decoder_block(Tensor(h), blk, cfg).data
    return cache


def run_stack(x: Tensor, blocks: list[DecoderBlockParams], cfg: AttentionConfig, past=None,
              check_finite: bool = True) -> Tensor:
    from .errors import NumericalError

    for i, blk in enumerate(blocks):
        x = decoder_block(x, blk, cfg, past=None if past is None else past[i])
        if check_finite and not np.all(np.isfinite(x.data)):
            raise NumericalError("non-finite activations in decoder stack", layer=i)
    return x


@dataclass
class EmbeddingTable:
    E: Tensor
    P: Tensor

    @classmethod
    def create(cls, store: ParamStore, vocab: int, max_len: int, d_model: int, rng: np.random.Generator,
               frozen: bool = True) -> "EmbeddingTable":
        return cls(
            E=store.add("embed.E", rng.normal(0.0, 1.0, size=(vocab, d_model)), frozen=frozen),
            P=store.add("embed.P", rng.normal(0.0, 0.1, size=(max_len, d_model)), frozen=frozen),
        )

    @property
    def vocab(self) -> int:
        return self.E.shape[0]


def embed(tokens, table: EmbeddingTable, offset: int = 0) -> Tensor:
    """Token rows plus positional rows ``offset .. offset+T``; ``tokens`` may carry batch axes."""
    ids = np.asarray(tokens, dtype=np.int64)
    t = ids.shape[-1]
    if offset + t > table.P.shape[0]:
        raise ValidationError(f"sequence of {offset + t} positions exceeds table length {table.P.shape[0]}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.vocab):
        raise ValidationError(f"token id outside [0, {table.vocab})")
    return T.take_rows(table.E, ids) + T.getitem(table.P, slice(offset, offset + t))


def tied_logits(h: Tensor, table: EmbeddingTable) -> Tensor:
    """Vocabulary logits through the transposed token embedding."""
    return h @ table.E.transpose()
