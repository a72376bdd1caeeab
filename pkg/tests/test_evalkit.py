import csv
import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cldfd.data import LabeledDataset
from cldfd.errors import ConfigError, ContractError, EpisodeError, ShapeError
from cldfd.evalkit import (
    FDConfig,
    MetricsRecord,
    ci95,
    cluster_rand_index,
    evaluate,
    evaluate_features,
    export_features,
    feature_denoise,
    finetune_linear,
    per_block_rand_index,
    rand_index,
    sample_episode,
)
from cldfd.model import BackboneConfig, build_backbone, snapshot_params
from cldfd.numerics import Tensor
from cldfd.numerics.rng import stream

SMALL = BackboneConfig(channels=(4, 8, 8, 16), strides=(1, 2, 2, 2), input_size=16)


# --- feature denoising ---------------------------------------------------------------


def test_fd_examples():
    out = feature_denoise(np.array([0.9, 0.1, 0.5, 0.0]), FDConfig(2, 1.0))
    assert np.array_equal(out, [0.9, 0.0, 0.5, 0.0])
    assert feature_denoise(np.array([0.25]), FDConfig(1, 0.5))[0] == pytest.approx(0.5)
    s = np.random.default_rng(0).random(7)
    assert np.array_equal(feature_denoise(s, FDConfig(7, 1.0)), s)
    big = np.random.default_rng(1).random(512)
    assert np.count_nonzero(feature_denoise(big, FDConfig(64, 0.4))) <= 64


def test_fd_ties_prefer_lower_index_and_errors():
    out = feature_denoise(np.array([1.0, 2.0, 1.0, 1.0]), FDConfig(2, 1.0))
    assert np.array_equal(out, [1.0, 2.0, 0.0, 0.0])
    with pytest.raises(ContractError):
        feature_denoise(np.array([0.1, -0.2]), FDConfig(1, 0.4))
    with pytest.raises(ConfigError):
        feature_denoise(np.ones(3), FDConfig(4, 0.4))
    with pytest.raises(ConfigError):
        FDConfig(0, 0.4)
    with pytest.raises(ConfigError):
        FDConfig(4, 0.0)


def test_fd_tensor_rows():
    x = Tensor(np.array([[0.1, 0.3, 0.2], [0.5, 0.4, 0.0]], np.float32))
    out = feature_denoise(x, FDConfig(1, 1.0))
    assert isinstance(out, Tensor)
    assert np.array_equal(out.data, np.array([[0, 0.3, 0], [0.5, 0, 0]], np.float32))


@settings(max_examples=200, deadline=None)
@given(
    d=st.integers(1, 40), seed=st.integers(0, 2**20), beta=st.floats(0.05, 1.0), frac=st.floats(0.01, 1.0),
)
def test_fd_kept_set_dominance_and_order(d, seed, beta, frac):
    r = np.random.default_rng(seed)
    s = r.random(d)
    if seed % 3 == 0:
        s = np.round(s * 4) / 4  # force ties
    h = max(1, int(frac * d))
    out = feature_denoise(s, FDConfig(h, beta))
    kept = np.zeros(d, bool)
    kept[np.argsort(-s, kind="stable")[:h]] = True
    assert np.count_nonzero(out) <= h
    if (~kept).any():
        assert s[~kept].max() <= s[kept].min()
    np.testing.assert_allclose(out[kept], s[kept] ** beta, rtol=1e-12)
    assert np.all(out[~kept] == 0)
    # order among kept entries is preserved
    ks = s[kept]
    ko = out[kept]
    assert np.all(np.sign(np.subtract.outer(ks, ks)) == np.sign(np.subtract.outer(ko, ko)))


# --- episodes ---------------------------------------------------------------------------------


def _labels(classes=6, per=20):
    return np.repeat(np.arange(classes), per)


def test_episode_sizes_and_disjointness():
    ep = sample_episode(_labels(), 5, 1, 15, stream(0, "e"))
    assert len(ep.support_idx) == 5 and len(ep.query_idx) == 75
    assert not set(ep.support_idx) & set(ep.query_idx)
    labels = _labels()
    assert len(set(ep.classes)) == 5
    for k, c in enumerate(ep.classes):
        assert np.all(labels[ep.support_idx[ep.support_labels == k]] == c)
        assert np.all(labels[ep.query_idx[ep.query_labels == k]] == c)


def test_episode_reproducible_and_errors():
    a = sample_episode(_labels(), 5, 5, 15, stream(3, "e"))
    b = sample_episode(_labels(), 5, 5, 15, stream(3, "e"))
    assert np.array_equal(a.support_idx, b.support_idx) and np.array_equal(a.query_idx, b.query_idx)
    with pytest.raises(EpisodeError):
        sample_episode(_labels(4), 5, 1, 15, stream(0, "e"))
    with pytest.raises(EpisodeError):
        sample_episode(_labels(6, 10), 5, 1, 15, stream(0, "e"))


def test_episode_class_frequencies_multinomial():
    labels = _labels(8, 20)
    draws = 2000
    counts = np.zeros(8)
    for e in range(draws):
        ep = sample_episode(labels, 5, 1, 5, stream(11, "freq", e))
        counts[ep.classes] += 1
    p = 5 / 8
    sd = math.sqrt(draws * p * (1 - p))
    assert np.all(np.abs(counts - draws * p) < 3 * sd), counts


# --- linear probe and evaluation ---------------------------------------------------------------


def test_linear_probe_fits_separable_support():
    r = np.random.default_rng(0)
    y = np.repeat(np.arange(5), 3)
    x = np.eye(5)[y] * 5 + 0.01 * r.random((15, 5))
    probe = finetune_linear(x, y, 5)
    assert np.all(probe.predict(x) == y)
    assert probe.losses[-1] < probe.losses[0]


def test_fd_identity_config_equals_no_fd():
    r = np.random.default_rng(1)
    feats = r.random((60, 16))
    labels = np.repeat(np.arange(5), 12)
    a = evaluate_features(feats, labels, episodes=20, seed=3, query=5)
    b = evaluate_features(feats, labels, episodes=20, seed=3, query=5, fd=FDConfig(16, 1.0))
    assert a.accuracies == b.accuracies and a.mean == b.mean and a.ci95 == b.ci95


def test_all_correct_stub_gives_unit_mean_zero_ci():
    feats = np.random.default_rng(0).random((60, 4))
    labels = np.repeat(np.arange(5), 12)

    def oracle_fit(x, y, way):
        return lambda q: query_truth.pop(0)

    # the stub answers with the true query labels of each episode, in order
    query_truth = []
    for e in range(10):
        query_truth.append(sample_episode(labels, 5, 1, 5, stream(0, "episode", e)).query_labels)
    rec = evaluate_features(feats, labels, query=5, episodes=10, seed=0, fit=oracle_fit)
    assert rec.mean == 1.0 and rec.ci95 == 0.0


def test_ci95_formula_and_scaling():
    accs = np.random.default_rng(0).random(600)
    assert ci95(accs) == pytest.approx(1.96 * accs.std(ddof=1) / math.sqrt(600), rel=1e-12)
    r = np.random.default_rng(5)
    small = [ci95(r.normal(0.5, 0.1, 100)) for _ in range(200)]
    large = [ci95(r.normal(0.5, 0.1, 400)) for _ in range(200)]
    assert np.mean(small) / np.mean(large) == pytest.approx(2.0, rel=0.05)
    with pytest.raises(ValueError):
        ci95([0.5])


def test_encoder_untouched_by_evaluation():
    net = build_backbone(SMALL, 0)
    imgs = np.random.default_rng(0).random((40, 3, 16, 16)).astype(np.float32)
    pool = LabeledDataset(imgs, np.repeat(np.arange(5), 8), 5, "target")
    before = snapshot_params(net)
    rec = evaluate(net, pool, query=3, episodes=5, seed=0)
    assert snapshot_params(net) == before
    assert 0 <= rec.mean <= 1 and rec.ci95 >= 0


def test_metrics_json_schema(tmp_path):
    rec = MetricsRecord([0.5, 1.0], 0.75, 0.1234567891, 2, 5, 1, {"h": 8, "beta": 0.4}, [0.1234567891], 3)
    path = tmp_path / "metrics.json"
    rec.write(path)
    data = json.loads(path.read_text())
    assert set(data) == {"mean", "ci95", "episodes", "way", "shot", "fd", "per_block_rand_index", "seed"}
    assert data["ci95"] == 0.123457 and data["per_block_rand_index"] == [0.123457]


# --- rand index -------------------------------------------------------------------------------------


def _brute_rand(a, b):
    agree = total = 0
    for i, j in itertools.combinations(range(len(a)), 2):
        total += 1
        agree += (a[i] == a[j]) == (b[i] == b[j])
    return agree / total


def test_rand_index_examples():
    assert rand_index([0, 0, 1, 1], [0, 1, 0, 1]) == pytest.approx(1 / 3)
    assert rand_index([0, 0, 1, 2], [5, 5, 7, 9]) == 1.0
    with pytest.raises(ShapeError):
        rand_index([0, 1], [0, 1, 1])


@settings(max_examples=100, deadline=None)
@given(data=st.data())
def test_rand_index_symmetry_relabeling_and_oracle(data):
    n = data.draw(st.integers(2, 12))
    a = data.draw(st.lists(st.integers(0, 4), min_size=n, max_size=n))
    b = data.draw(st.lists(st.integers(0, 4), min_size=n, max_size=n))
    perm = data.draw(st.permutations(range(5)))
    ri = rand_index(a, b)
    assert ri == _brute_rand(a, b)
    assert ri == rand_index(b, a)
    assert ri == rand_index(a, [perm[v] for v in b])


def test_cluster_rand_index_perfect_features_and_noise_baseline():
    labels = np.repeat(np.arange(4), 15)
    onehot = np.eye(4)[labels]
    ri, ok = cluster_rand_index(onehot, labels, seed=0)
    assert ri == 1.0 and ok
    noise = np.random.default_rng(0).normal(size=(60, 8))
    ri_noise, _ = cluster_rand_index(noise, labels, seed=0)
    r = np.random.default_rng(1)
    baseline = [cluster_rand_index(noise, r.permutation(labels), seed=0)[0] for _ in range(10)]
    assert abs(ri_noise - np.mean(baseline)) < 4 * np.std(baseline) + 0.02
    assert cluster_rand_index(noise, labels, seed=0) == (ri_noise, _)


def test_per_block_rand_index_and_export(tmp_path):
    net = build_backbone(SMALL, 0)
    imgs = np.random.default_rng(0).random((20, 3, 16, 16)).astype(np.float32)
    pool = LabeledDataset(imgs, np.repeat(np.arange(4), 5), 4, "target")
    res = per_block_rand_index(net, pool, seed=0)
    assert len(res.values) == 4 and all(0 <= v <= 1 for v in res.values)
    assert per_block_rand_index(net, pool, seed=0).values == res.values

    path = tmp_path / "features.csv"
    export_features(net, pool, [1, 4], path)
    rows = list(csv.reader(path.open()))
    assert rows[0][0] == "label" and rows[0][1] == "block1_0" and rows[0][-1] == "block4_15"
    assert len(rows) == 21
    from cldfd.evalkit import extract_features

    _, taps = extract_features(net, imgs, taps=True)
    parsed = np.array([[float(v) for v in r[1:5]] for r in rows[1:]])
    np.testing.assert_allclose(parsed, taps[0], rtol=1e-5)
    with pytest.raises(ConfigError):
        export_features(net, pool, [5], path)
