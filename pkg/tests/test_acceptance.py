"""The ten acceptance criteria, one test each; outcomes are echoed in the terminal summary.

Criteria 6-8 train real models and carry the ``slow`` marker.
"""

import itertools
import json
import math
import time

import numpy as np
import pytest

from conftest import record
from test_attention import block, loop_attention
from test_geo import _feats, morans_loop
from test_model import make_batch
from test_tensor import _op_cases
from test_train import two_pass

from tides import revin
from tides.attention import AttentionConfig, decoder_block, mha, mqa
from tides.cli import main
from tides.data import SynthConfig, generate_synthetic
from tides.geo import (MASK_VALUE, RegionMeta, graph_from_adjacency, haversine_km, kmeans_cluster,
                       local_morans_i)
from tides.gradcheck import gradcheck
from tides.metrics import mae, metric_block, pearson_r, rmse
from tides.model import TidesConfig, TidesParams, forward
from tides.pipeline import ClusterTask, PipelineConfig, TidesModel, cluster_regions, fit, prepare
from tides.tensor import Tensor, backward, softmax_rows
from tides.train import AdamW, TrainConfig

BENCH_SEEDS = (7, 8, 9)


def test_criterion_01_gradients():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(5):
        for fn, params in _op_cases(np.random.default_rng(seed)).values():
            worst = max(worst, gradcheck(fn, params))
    cfg = TidesConfig(history=32, backbone_layers=1, prompt_max_len=8, vocab_size=20)
    p = TidesParams(cfg, seed=6)
    b = make_batch(cfg, np.random.default_rng(0), r=2, b=1,
                   graph=graph_from_adjacency(["r0", "r1"], np.ones((2, 2))))

    def loss():
        d = forward(b, p) - b.targets
        return (d * d).mean()

    worst = max(worst, gradcheck(loss, p.store.trainable(), max_coords=12))
    took = time.perf_counter() - t0
    ok = worst < 1e-3 and took < 60
    record(1, ok, f"max rel err {worst:.2e}, {took:.1f} s")
    assert ok


def test_criterion_02_oracles():
    rng = np.random.default_rng(2)
    err_moran = 0.0
    for n in range(2, 51):
        a = rng.uniform(size=(n, n)) * (rng.uniform(size=(n, n)) < 0.3)
        g = graph_from_adjacency([str(i) for i in range(n)], np.maximum(a, a.T))
        x = rng.normal(size=n)
        err_moran = max(err_moran, np.abs(local_morans_i(x, g) - morans_loop(list(x), g.adjacency.tolist())).max())

    err_attn = 0.0
    for causal in (False, True):
        for mode, h in (("MHA", 2), ("MQA", 4)):
            cfg = AttentionConfig(8, h, mode, causal)
            p = block(cfg, 3)
            x = rng.normal(size=(4, 8))
            dk = cfg.d_k
            if mode == "MHA":
                ref = loop_attention(x, p.w_q.data, lambda i: p.w_k.data[:, i * dk:(i + 1) * dk],
                                     lambda i: p.w_v.data[:, i * dk:(i + 1) * dk], p.w_o.data, h, causal)
                got = mha(Tensor(x), p, cfg).data
            else:
                ref = loop_attention(x, p.w_q.data, lambda i: p.w_k.data, lambda i: p.w_v.data, p.w_o.data, h,
                                     causal)
                got = mqa(Tensor(x), p, cfg).data
            err_attn = max(err_attn, np.abs(got - ref).max())

    km_ok = True
    for seed in range(5):
        for n, k in ((5, 2), (6, 2), (6, 3)):
            pts = np.random.default_rng(seed).normal(size=(n, 7))
            res = kmeans_cluster(_feats(pts), K=k, seed=seed)
            z = (pts - res.scaler_mean) / res.scaler_std
            best = min(sum(((z[lab == c] - z[lab == c].mean(0)) ** 2).sum() for c in range(k))
                       for lab in map(np.array, itertools.product(range(k), repeat=n))
                       if len(set(lab.tolist())) == k)
            km_ok &= abs(res.objective - best) <= 1e-12 * max(1.0, best)

    err_met = 0.0
    for n in (1, 7, 100, 1000):
        y, p = rng.normal(size=n) * 10, rng.normal(size=n) * 10
        m, r, c = two_pass(list(y), list(p))
        err_met = max(err_met, abs(mae(y, p) - m), abs(rmse(y, p) - r))
        if n > 1:
            err_met = max(err_met, abs(pearson_r(y, p) - c))

    ok = err_moran < 1e-12 and err_attn < 1e-10 and km_ok and err_met < 1e-12
    record(2, ok, f"moran {err_moran:.1e}, attention {err_attn:.1e}, k-means exact {km_ok}, metrics {err_met:.1e}")
    assert ok


def test_criterion_03_invariants(small_city):
    rng = np.random.default_rng(3)
    x = rng.normal(size=(6, 9)) * 5
    mask = np.where(rng.uniform(size=(6, 9)) < 0.4, MASK_VALUE, 0.0)
    mask[:, 0] = 0.0
    s = softmax_rows(Tensor(x + mask)).data
    row_err = np.abs(s.sum(-1) - 1).max()
    masked = s[mask < 0].max()

    cfg = AttentionConfig(8, 2, "MQA", causal=True)
    p = block(cfg, 1)
    seq = rng.normal(size=(5, 8))
    pert = seq.copy()
    pert[3:] += rng.normal(size=(2, 8))
    causal_ok = np.array_equal(decoder_block(Tensor(seq), p, cfg).data[:3],
                               decoder_block(Tensor(pert), p, cfg).data[:3])

    series, regions = small_city
    data = prepare(series, regions, PipelineConfig(train_stride=32))
    task = ClusterTask(data, 0, data.region_ids[:3], knn=2)
    model = TidesModel(task, TidesConfig(backbone_layers=1), seed=0)
    frozen_before = {n: model.store[n].data.copy() for n in model.store if model.store.is_frozen(n)}
    fit(model, TrainConfig(max_epochs=5, early_stop_patience=5, lr=1e-2))
    frozen_ok = all(np.array_equal(model.store[n].data, a) for n, a in frozen_before.items())

    w = rng.uniform(0, 100, size=(50, 96))
    z, mu, sd = revin.normalize_batch(w)
    rt = np.abs(revin.denormalize_batch(z, mu, sd) - w).max()

    zero = block(cfg, 2)
    for name in ("w_q", "w_k", "w_v", "w_o", "w_1", "w_2"):
        getattr(zero, name).data[...] = 0.0
    ident = np.array_equal(decoder_block(Tensor(seq), zero, cfg).data, seq)

    ok = row_err < 1e-12 and masked < 1e-12 and causal_ok and frozen_ok and rt < 1e-9 and ident
    record(3, ok, f"rows {row_err:.1e}, masked {masked:.1e}, causal {causal_ok}, frozen {frozen_ok}, "
                  f"revin {rt:.1e}, zero-block identity {ident}")
    assert ok


def test_criterion_04_mqa_mha_tying():
    rng = np.random.default_rng(4)
    worst = 0.0
    for h in (1, 2, 4, 8):
        cq = AttentionConfig(16, h, "MQA", causal=True)
        ch = AttentionConfig(16, h, "MHA", causal=True)
        pq, ph = block(cq, h), block(ch, h)
        ph.w_q.data[...] = pq.w_q.data
        ph.w_o.data[...] = pq.w_o.data
        ph.w_k.data[...] = np.tile(pq.w_k.data, (1, h))
        ph.w_v.data[...] = np.tile(pq.w_v.data, (1, h))
        x = Tensor(rng.normal(size=(2, 6, 16)))
        worst = max(worst, np.abs(mqa(x, pq, cq).data - mha(x, ph, ch).data).max())
    record(4, worst < 1e-12, f"max abs diff {worst:.1e}")
    assert worst < 1e-12


def test_criterion_05_haversine():
    quarter = haversine_km(RegionMeta("a", 0.0, 0.0), RegionMeta("b", 0.0, 90.0))
    q_err = abs(quarter - math.pi * 6371.0 / 2)
    rng = np.random.default_rng(5)
    sym_ok = tri_ok = True
    for _ in range(1000):
        a, b, c = (RegionMeta("x", rng.uniform(-90, 90), rng.uniform(-180, 180)) for _ in range(3))
        ab, ba = haversine_km(a, b), haversine_km(b, a)
        sym_ok &= ab == ba
        tri_ok &= haversine_km(a, c) <= ab + haversine_km(b, c) + 1e-9
    ok = q_err < 1e-6 and sym_ok and tri_ok
    record(5, ok, f"quarter circle err {q_err:.1e} km, symmetry {sym_ok}, triangle {tri_ok}")
    assert ok


@pytest.mark.slow
def test_criterion_06_single_batch_overfit():
    series, regions = generate_synthetic(SynthConfig(n_regions=4, days=7, seed=6))
    data = prepare(series, regions, PipelineConfig())
    task = ClusterTask(data, 0, data.region_ids, knn=3)
    model = TidesModel(task, seed=0)
    batch = model.batch(data.starts["train"][:8])
    opt = AdamW(model.store.trainable())
    t0 = time.perf_counter()
    mse, steps = math.inf, 0
    while steps < 500 and mse >= 1e-3:
        opt.zero_grad()
        loss = model.loss(batch)
        mse = loss.item()
        if mse < 1e-3:
            break
        backward(loss)
        opt.step(3e-3)
        steps += 1
    took = time.perf_counter() - t0
    ok = mse < 1e-3 and took < 300
    record(6, ok, f"train MSE {mse:.2e} after {steps} steps, {took:.0f} s")
    assert ok


# ----------------------------------------------------------------- benchmark
@pytest.fixture(scope="session")
def bench(tmp_path_factory):
    """Synthesizes and clusters the benchmark city once; trains and scores models lazily."""
    root = tmp_path_factory.mktemp("bench")
    t0 = time.perf_counter()
    assert main(["synth", "--regions", "40", "--days", "28", "--seed", "7", "--spatial-corr", "0.7",
                 "--out", str(root / "data")]) == 0
    assert main(["cluster", "--data", str(root / "data"), "--k-clusters", "4", "--seed", "7",
                 "--out", str(root / "clu")]) == 0
    setup = time.perf_counter() - t0
    cache = {}

    def run(kind="tides", seed=7, isolate=False):
        key = (kind, seed, isolate)
        if key in cache:
            return cache[key]
        tag = f"{kind}_s{seed}{'_iso' if isolate else ''}"
        common = ["--data", str(root / "data"), "--clusters", str(root / "clu" / "clusters.csv"), "--seed", str(seed)]
        t = time.perf_counter()
        if kind != "seasonal_naive":
            extra = ["--baseline", kind] if kind != "tides" else (["--isolate"] if isolate else [])
            assert main(["train", *common, "--epochs", "30", *extra, "--out", str(root / tag)]) == 0
        assert main(["evaluate", *common, "--model", kind, "--models", str(root / tag), "--name", tag,
                     "--out", str(root / "eval")]) == 0
        rep = json.loads((root / "eval" / f"{tag}_report.json").read_text())
        cache[key] = (rep["aggregate"]["mae"], time.perf_counter() - t)
        return cache[key]

    run.setup_seconds = setup
    return run


@pytest.mark.slow
def test_criterion_07_benchmark(bench):
    tides, t_tides = bench("tides")
    dl, t_dl = bench("dlinear")
    sn, t_sn = bench("seasonal_naive")
    total = bench.setup_seconds + t_tides + t_dl + t_sn
    ok = tides <= 0.85 * sn and tides <= 1.05 * dl and total < 20 * 60
    record(7, ok, f"TIDES {tides:.4f}, seasonal naive {sn:.4f} (ratio {tides / sn:.3f}), DLinear {dl:.4f} "
                  f"(ratio {tides / dl:.3f}), pipeline {total / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_criterion_08_spatial_ablation(bench):
    graph = [bench("tides", s)[0] for s in BENCH_SEEDS]
    iso = [bench("tides", s, isolate=True)[0] for s in BENCH_SEEDS]
    ok = np.mean(iso) >= np.mean(graph)
    record(8, ok, f"isolated {np.mean(iso):.4f} vs graph {np.mean(graph):.4f} "
                  f"(per seed graph {[round(v, 4) for v in graph]}, isolated {[round(v, 4) for v in iso]})")
    assert ok


def test_criterion_09_ground_truth_calibration():
    y = np.abs(np.random.default_rng(9).normal(size=(20, 4, 4))) * 50 + 1
    z = (y - 30) / 7
    blk = metric_block(z, z.copy(), y, y.copy())
    vals = (blk["mae"], blk["rmse"], blk["mape_percent"], blk["pearson_r"])
    ok = vals == (0.0, 0.0, 0.0, 1.0)
    record(9, ok, f"MAE/RMSE/MAPE/r = {vals}")
    assert ok


def test_criterion_10_determinism(tmp_path):
    assert main(["synth", "--regions", "6", "--days", "8", "--seed", "4", "--out", str(tmp_path / "d")]) == 0
    assert main(["cluster", "--data", str(tmp_path / "d"), "--k-clusters", "2", "--out", str(tmp_path / "c")]) == 0
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["train", "--data", str(tmp_path / "d"), "--clusters", str(tmp_path / "c" / "clusters.csv"),
                     "--epochs", "2", "--backbone-layers", "1", "--out", str(out)]) == 0
        outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.name != "manifest.json"})
    same = outs[0] == outs[1] and len(outs[0]) >= 6
    record(10, same, f"{len(outs[0])} history/checkpoint files byte-identical: {same}")
    assert same
