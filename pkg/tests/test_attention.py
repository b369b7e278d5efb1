import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tides import tensor as T
from tides.attention import (MASK_VALUE, AttentionConfig, DecoderBlockParams, EmbeddingTable, causal_mask,
                             decoder_block, embed, mha, mqa, prefix_cache, run_stack, tied_logits)
from tides.errors import ValidationError
from tides.gradcheck import gradcheck
from tides.params import ParamStore
from tides.tensor import DimensionError, Tensor, backward
from tides.train import AdamW


def block(cfg, seed=0, frozen=False):
    return DecoderBlockParams.create(ParamStore(), "b", cfg, np.random.default_rng(seed), frozen=frozen)


def loop_attention(x, wq, wks, wvs, wo, h, causal, extra=None):
    """Per head, per query, per key: explicit loops over positions."""
    t, d = x.shape
    dk = d // h
    out = np.zeros((t, h * dk))
    for i in range(h):
        wk, wv = wks(i), wvs(i)
        for a in range(t):
            q = x[a] @ wq[:, i * dk:(i + 1) * dk]
            logits = []
            for b in range(t):
                s = float(q @ (x[b] @ wk)) / math.sqrt(dk)
                if causal and b > a:
                    s += MASK_VALUE
                if extra is not None:
                    s += extra[a, b]
                logits.append(s)
            m = max(logits)
            e = [math.exp(v - m) for v in logits]
            z = sum(e)
            for b in range(t):
                out[a, i * dk:(i + 1) * dk] += e[b] / z * (x[b] @ wv)
    return out @ wo


@pytest.mark.parametrize("causal", [False, True])
def test_mha_matches_loop_oracle(causal, rng):
    cfg = AttentionConfig(8, 2, "MHA", causal)
    p = block(cfg, 3)
    x = rng.normal(size=(3, 8))
    extra = np.where(rng.uniform(size=(3, 3)) < 0.3, MASK_VALUE, 0.0)
    np.fill_diagonal(extra, 0.0)
    dk = cfg.d_k
    ref = loop_attention(x, p.w_q.data, lambda i: p.w_k.data[:, i * dk:(i + 1) * dk],
                         lambda i: p.w_v.data[:, i * dk:(i + 1) * dk], p.w_o.data, 2, causal, extra)
    np.testing.assert_allclose(mha(Tensor(x), p, cfg, extra).data, ref, atol=1e-10, rtol=0)


@pytest.mark.parametrize("causal", [False, True])
def test_mqa_matches_loop_oracle(causal, rng):
    cfg = AttentionConfig(8, 4, "MQA", causal)
    p = block(cfg, 4)
    x = rng.normal(size=(3, 8))
    ref = loop_attention(x, p.w_q.data, lambda i: p.w_k.data, lambda i: p.w_v.data, p.w_o.data, 4, causal)
    np.testing.assert_allclose(mqa(Tensor(x), p, cfg).data, ref, atol=1e-10, rtol=0)


def test_single_token_returns_projected_value(rng):
    cfg = AttentionConfig(8, 2, "MHA", True)
    p = block(cfg)
    x = rng.normal(size=(1, 8))
    np.testing.assert_allclose(mha(Tensor(x), p, cfg).data, x @ p.w_v.data @ p.w_o.data, atol=1e-14)


def test_zero_query_key_gives_uniform_weights(rng):
    cfg = AttentionConfig(8, 2, "MHA", False)
    p = block(cfg)
    p.w_q.data[...] = 0.0
    p.w_k.data[...] = 0.0
    x = rng.normal(size=(5, 8))
    out, w = mha(Tensor(x), p, cfg, return_weights=True)
    np.testing.assert_allclose(w, 0.2, atol=1e-15)
    np.testing.assert_allclose(out.data, np.tile((x @ p.w_v.data).mean(0) @ p.w_o.data, (5, 1)), atol=1e-12)


def test_mask_shape_mismatch(rng):
    cfg = AttentionConfig(8, 2, "MHA", False)
    with pytest.raises(DimensionError):
        mha(Tensor(rng.normal(size=(3, 8))), block(cfg), cfg, np.zeros((2, 2)))


def test_single_head_mqa_equals_mha_bitwise(rng):
    mcfg, qcfg = AttentionConfig(8, 1, "MHA"), AttentionConfig(8, 1, "MQA")
    p = block(mcfg)
    x = Tensor(rng.normal(size=(6, 8)))
    np.testing.assert_array_equal(mha(x, p, mcfg).data, mqa(x, p, qcfg).data)


@given(st.integers(0, 10_000), st.sampled_from([1, 2, 4, 8]))
def test_mqa_equals_mha_with_tied_heads(seed, h):
    r = np.random.default_rng(seed)
    d = 8
    qcfg, mcfg = AttentionConfig(d, h, "MQA"), AttentionConfig(d, h, "MHA")
    q = block(qcfg, seed)
    m = block(mcfg, seed + 1)
    for name in ("w_q", "w_o", "w_1", "w_2"):
        getattr(m, name).data[...] = getattr(q, name).data
    m.w_k.data[...] = np.tile(q.w_k.data, (1, h))
    m.w_v.data[...] = np.tile(q.w_v.data, (1, h))
    x = Tensor(r.normal(size=(5, d)))
    np.testing.assert_allclose(mqa(x, q, qcfg).data, mha(x, m, mcfg).data, atol=1e-12, rtol=0)


def test_mqa_kv_parameter_count():
    h = 4
    q, m = block(AttentionConfig(16, h, "MQA")), block(AttentionConfig(16, h, "MHA"))
    assert (q.w_k.size + q.w_v.size) * h == m.w_k.size + m.w_v.size


@pytest.mark.parametrize("mode", ["MHA", "MQA"])
def test_weights_rows_sum_to_one_and_mask_blocks(mode, rng):
    cfg = AttentionConfig(8, 2, mode, True)
    p = block(cfg)
    extra = np.zeros((6, 6))
    extra[3, 1] = MASK_VALUE
    _, w = (mha if mode == "MHA" else mqa)(Tensor(rng.normal(size=(6, 8))), p, cfg, extra, return_weights=True)
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)
    assert np.all(w[..., np.triu_indices(6, 1)[0], np.triu_indices(6, 1)[1]] < 1e-12)
    assert np.all(w[..., 3, 1] < 1e-12)


@pytest.mark.parametrize("mode", ["MHA", "MQA"])
def test_causality_exact(mode, rng):
    cfg = AttentionConfig(8, 2, mode, True)
    blocks = [block(cfg, s) for s in range(2)]
    x = rng.normal(size=(6, 8))
    y = x.copy()
    y[4] += rng.normal(size=8)
    a = run_stack(Tensor(x), blocks, cfg).data
    b = run_stack(Tensor(y), blocks, cfg).data
    np.testing.assert_array_equal(a[:4], b[:4])
    assert not np.allclose(a[4:], b[4:])


def test_causal_mask_offset():
    m = causal_mask(2, 4)
    np.testing.assert_array_equal(m == 0, [[1, 1, 1, 0], [1, 1, 1, 1]])


@pytest.mark.parametrize("mode", ["MHA", "MQA"])
def test_zero_weight_block_is_identity(mode, rng):
    cfg = AttentionConfig(8, 2, mode)
    p = block(cfg)
    for name in ("w_q", "w_k", "w_v", "w_o", "w_1", "w_2"):
        getattr(p, name).data[...] = 0.0
    x = rng.normal(size=(4, 8))
    np.testing.assert_array_equal(decoder_block(Tensor(x), p, cfg).data, x)


@pytest.mark.parametrize("mode", ["MHA", "MQA"])
def test_block_gradcheck(mode, rng):
    cfg = AttentionConfig(8, 2, mode)
    p = block(cfg)
    x = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
    w = rng.normal(size=(4, 8))
    params = [x, p.w_q, p.w_k, p.w_v, p.w_o, p.w_1, p.w_2, p.ln1_gain, p.ln2_bias]
    assert gradcheck(lambda: (decoder_block(x, p, cfg) * w).sum(), params) < 1e-4


def test_frozen_block_bit_identical_after_step(rng):
    cfg = AttentionConfig(8, 2, "MQA")
    store = ParamStore()
    frozen = DecoderBlockParams.create(store, "f", cfg, rng, frozen=True)
    live = DecoderBlockParams.create(store, "l", cfg, rng)
    before = store.snapshot()
    opt = AdamW(store.trainable())
    loss = (decoder_block(decoder_block(Tensor(rng.normal(size=(3, 8))), frozen, cfg), live, cfg) ** 2).sum()
    backward(loss)
    opt.step(0.1)
    after = store.snapshot()
    for name in before:
        same = np.array_equal(before[name], after[name])
        assert same == name.startswith("f."), name


def test_prefix_cache_equals_full_sequence(rng):
    cfg = AttentionConfig(8, 2, "MQA", True)
    blocks = [block(cfg, s) for s in range(3)]
    pre, suf = rng.normal(size=(2, 5, 8)), rng.normal(size=(2, 3, 8))
    full = run_stack(Tensor(np.concatenate([pre, suf], axis=1)), blocks, cfg).data[:, 5:]
    cached = run_stack(Tensor(suf), blocks, cfg, past=prefix_cache(pre, blocks, cfg)).data
    np.testing.assert_allclose(cached, full, atol=1e-12)


# ---------------------------------------------------------------- embedding
def table(vocab=5, max_len=4, d=3, seed=0):
    return EmbeddingTable.create(ParamStore(), vocab, max_len, d, np.random.default_rng(seed), frozen=False)


def test_zero_tables_embed_to_zero():
    t = table()
    t.E.data[...] = 0.0
    t.P.data[...] = 0.0
    np.testing.assert_array_equal(embed([1, 2, 3], t).data, np.zeros((3, 3)))


def test_repeated_token_differs_by_positions():
    t = table()
    h = embed([2, 2], t).data
    np.testing.assert_allclose(h[0] - h[1], t.P.data[0] - t.P.data[1], atol=1e-15)


def test_embed_grad_is_sparse(rng):
    t = table()
    w = rng.normal(size=(3, 3))
    fn = lambda: (embed([1, 3, 1], t) * w).sum()
    assert gradcheck(fn, [t.E, t.P]) < 1e-6
    t.E.zero_grad()
    backward(fn())
    assert np.all(t.E.grad[[0, 2, 4]] == 0) and np.any(t.E.grad[1] != 0)


def test_embed_validation():
    t = table()
    with pytest.raises(ValidationError):
        embed([5], t)
    with pytest.raises(ValidationError):
        embed([0] * 5, t)


def test_tied_logits_shape(rng):
    t = table()
    assert tied_logits(Tensor(rng.normal(size=(2, 3))), t).shape == (2, 5)
