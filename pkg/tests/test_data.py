import numpy as np
import pytest

from tides.data import (STEPS_PER_DAY, SynthConfig, TrafficSeries, generate_synthetic, load_csv, make_windows,
                        num_windows, split_bounds, write_csv)
from tides.errors import ValidationError
from tides.geo import RegionMeta, haversine_matrix
from tides.pipeline import PipelineConfig, prepare

T0 = np.datetime64("2024-07-29T00:00")


def write(tmp_path, regions_text, traffic_text):
    rp, tp = tmp_path / "regions.csv", tmp_path / "traffic.csv"
    rp.write_text(regions_text)
    tp.write_text(traffic_text)
    return rp, tp


def test_round_trip(tmp_path, small_city):
    series, regions = small_city
    rp, tp = tmp_path / "r.csv", tmp_path / "t.csv"
    write_csv(series, regions, rp, tp)
    s2, r2 = load_csv(rp, tp)
    assert r2 == regions
    for a, b in zip(series, s2):
        assert a.region_id == b.region_id and a.start_time == b.start_time
        np.testing.assert_array_equal(a.values, b.values)


def test_shuffled_rows_load_sorted(tmp_path):
    lines = [f"A,2024-07-29T00:{m:02d}:00,{m}.0" for m in (0, 15, 30, 45)]
    rp, tp = write(tmp_path, "region_id,lat,lon\nA,36.6,117.0\n",
                   "region_id,timestamp,traffic_mb\n" + "\n".join([lines[2], lines[0], lines[3], lines[1]]) + "\n")
    (s,), _ = load_csv(rp, tp)
    np.testing.assert_array_equal(s.values, [0, 15, 30, 45])
    assert s.start_time == T0


def test_empty_traffic_file_is_an_error(tmp_path):
    with pytest.raises(ValidationError):
        load_csv(*write(tmp_path, "region_id,lat,lon\nA,36.6,117.0\n", ""))
    with pytest.raises(ValidationError, match="no traffic rows"):
        load_csv(*write(tmp_path, "region_id,lat,lon\nA,36.6,117.0\n", "region_id,timestamp,traffic_mb\n"))


def test_malformed_row_names_line(tmp_path):
    rp, tp = write(tmp_path, "region_id,lat,lon\nA,36.6,117.0\n",
                   "region_id,timestamp,traffic_mb\nA,2024-07-29T00:00,1\nA,2024-07-29T00:15,oops\n")
    with pytest.raises(ValidationError, match=":3:"):
        load_csv(rp, tp)


def test_gap_lists_missing_timestamps(tmp_path):
    rows = "\n".join(f"A,2024-07-29T00:{m:02d},1" for m in (0, 15, 45))
    with pytest.raises(ValidationError, match="2024-07-29T00:30"):
        load_csv(*write(tmp_path, "region_id,lat,lon\nA,36.6,117.0\n", "region_id,timestamp,traffic_mb\n" + rows))


def test_non_uniform_interval(tmp_path):
    rows = "\n".join(f"A,2024-07-29T00:{m:02d},1" for m in (0, 15, 25))
    with pytest.raises(ValidationError, match="non-uniform"):
        load_csv(*write(tmp_path, "region_id,lat,lon\nA,36.6,117.0\n", "region_id,timestamp,traffic_mb\n" + rows))


def test_unknown_region(tmp_path):
    with pytest.raises(ValidationError, match="unknown region"):
        load_csv(*write(tmp_path, "region_id,lat,lon\nA,36.6,117.0\n",
                        "region_id,timestamp,traffic_mb\nB,2024-07-29T00:00,1\n"))


def test_negative_traffic_rejected():
    with pytest.raises(ValidationError):
        TrafficSeries("A", T0, [1.0, -1.0])


# ------------------------------------------------------------- windowing
@pytest.mark.parametrize("extra,count", [(0, 1), (1, 2), (10, 11)])
def test_window_counts(extra, count):
    s = TrafficSeries("A", T0, np.arange(100.0 + extra))
    assert num_windows(len(s), 96, 4) == count
    tr, va, te = make_windows(s, split=(1.0, 0.0, 0.0))
    assert len(tr) == count and not va and not te


def test_short_series_rejected():
    with pytest.raises(ValidationError):
        make_windows(TrafficSeries("A", T0, np.zeros(99)))


def test_window_contents():
    s = TrafficSeries("A", T0, np.arange(120.0))
    tr, _, _ = make_windows(s)
    w = tr[3]
    np.testing.assert_array_equal(w.input, np.arange(3, 99))
    np.testing.assert_array_equal(w.target, np.arange(99, 103))
    assert w.input_timestamps[0] == T0 + np.timedelta64(45, "m")


def test_no_target_leaks_into_later_splits():
    s = TrafficSeries("A", T0, np.arange(2000.0))
    tr, va, te = make_windows(s)
    step = np.timedelta64(15, "m")
    last_target = lambda ws: max(w.input_timestamps[-1] + len(w.target) * step for w in ws)
    first_input_end = lambda ws: min(w.input_timestamps[-1] for w in ws)
    assert last_target(tr) < first_input_end(va)
    assert last_target(va) < first_input_end(te)


def test_split_fractions():
    n = 1000
    tr, va, te = split_bounds(n, 4)
    assert abs(tr.stop - 700) <= 1 and abs(va.stop - 800) <= 1 and te.stop == n
    with pytest.raises(ValidationError):
        split_bounds(n, 4, (0.5, 0.5, 0.5))


def test_prepare_scales_on_training_span(small_city):
    series, regions = small_city
    d = prepare(series, regions, PipelineConfig())
    span = d.raw[:, :d.train_end]
    np.testing.assert_allclose(d.z[:, :d.train_end].mean(axis=1), 0.0, atol=1e-10)
    np.testing.assert_allclose(d.mean, span.mean(axis=1))
    assert d.starts["train"].max() + d.history + d.horizon <= d.train_end
    rows = np.arange(len(regions))
    block = d.raw[None, :, :5]
    np.testing.assert_allclose(d.to_orig(d.to_z(block, rows), rows), block, atol=1e-9)


def test_prepare_constant_region_gets_unit_scale():
    regions = [RegionMeta("A", 36.6, 117.0), RegionMeta("B", 36.7, 117.1)]
    x = np.random.default_rng(0).uniform(1, 2, size=300)
    d = prepare([TrafficSeries("A", T0, np.full(300, 5.0)), TrafficSeries("B", T0, x)], regions, PipelineConfig())
    assert d.std[0] == 1.0 and np.all(d.z[0] == 0.0)


# -------------------------------------------------------------- synthetic
def test_synth_is_deterministic_and_valid():
    cfg = SynthConfig(n_regions=5, days=7, seed=11)
    a, ra = generate_synthetic(cfg)
    b, rb = generate_synthetic(cfg)
    assert ra == rb
    assert all(x.values.tobytes() == y.values.tobytes() for x, y in zip(a, b))
    assert all(len(s) == 7 * STEPS_PER_DAY and s.values.min() >= 0 for s in a)
    c, _ = generate_synthetic(SynthConfig(n_regions=5, days=7, seed=12))
    assert a[0].values.tobytes() != c[0].values.tobytes()


def test_synth_config_validation():
    with pytest.raises(ValidationError):
        generate_synthetic(SynthConfig(days=6))
    with pytest.raises(ValidationError):
        generate_synthetic(SynthConfig(n_regions=1))
    with pytest.raises(ValidationError):
        generate_synthetic(SynthConfig(spatial_corr_strength=1.5))


def near_minus_far(s, seed):
    series, regions = generate_synthetic(SynthConfig(seed=seed, spatial_corr_strength=s))
    x = np.stack([q.values for q in series])
    lat = np.array([r.lat for r in regions])
    lon = np.array([r.lon for r in regions])
    d = haversine_matrix(lat, lon, lat, lon)
    np.fill_diagonal(d, np.inf)
    c = np.corrcoef(x)
    near = c[np.arange(len(x)), d.argmin(axis=1)].mean()
    iu = np.triu_indices(len(x), 1)
    far = c[iu][d[iu] >= np.quantile(d[iu], 0.75)].mean()
    acf = np.mean([np.corrcoef(v[:-STEPS_PER_DAY], v[STEPS_PER_DAY:])[0, 1] for v in x])
    return near - far, acf


@pytest.mark.slow
def test_synth_spatial_correlation_knob():
    """Nearest-neighbour vs far-pair (top distance quartile) correlation over 30 seeds."""
    off = np.array([near_minus_far(0.0, s) for s in range(30)])
    on = np.array([near_minus_far(0.9, s) for s in range(30)])
    assert abs(off[:, 0].mean()) < 0.1
    assert on[:, 0].mean() > 0.3
    assert min(off[:, 1].min(), on[:, 1].min()) > 0.5


def test_synth_hotspot_sources():
    series, _ = generate_synthetic(SynthConfig(n_regions=6, days=7, seed=2, n_hotspots=3))
    assert len(series) == 6 and all(s.values.min() >= 0 for s in series)
