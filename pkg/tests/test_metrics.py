import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from isolayer.core import IsotonicConfig, IsotonicParams, forward
from isolayer.metrics import auc, ece, evaluate, normalized_entropy, oe_ratio, soft_auc
from oracles import brute_auc, brute_ece, brute_ne, brute_soft_auc


def test_auc_examples():
    assert auc([0.1, 0.9], [0, 1]) == 1.0
    assert auc([0.9, 0.1], [0, 1]) == 0.0
    assert auc([0.4] * 6, [0, 1, 0, 1, 1, 0]) == 0.5


def test_auc_errors():
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [0.5, 1])


def _small_case(rng):
    n = int(rng.integers(2, 13))
    labels = rng.integers(0, 2, n)
    labels[0], labels[1] = 0, 1
    rng.shuffle(labels)
    # coarse grid so ties are common
    preds = rng.integers(1, 20, n) / 20.0
    return preds, labels.astype(float)


def test_metrics_match_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        p, y = _small_case(rng)
        assert auc(p, y) == brute_auc(p, y)
        assert normalized_entropy(p, y) == pytest.approx(brute_ne(p, y), rel=1e-12, abs=1e-15)
        assert ece(p, y) == pytest.approx(brute_ece(p, y), rel=1e-12, abs=1e-15)


def test_soft_auc_matches_brute_force_and_hard_auc():
    rng = np.random.default_rng(1)
    for _ in range(200):
        n = int(rng.integers(2, 12))
        s = rng.integers(0, 5, n).astype(float)
        t = rng.random(n)
        assert soft_auc(s, t) == pytest.approx(brute_soft_auc(s, t), rel=1e-12)
        p, y = _small_case(rng)
        assert soft_auc(p, y) == pytest.approx(auc(p, y), rel=1e-12)


def test_ne_examples():
    y = np.array([1, 0, 0, 1, 0, 0, 0, 1.0])
    assert normalized_entropy(np.full(8, y.mean()), y) == pytest.approx(1.0, rel=1e-14)
    assert normalized_entropy([0.8, 0.2], [1, 0]) == pytest.approx(0.22314 / 0.69315, abs=1e-4)
    assert normalized_entropy([1 - 1e-12, 1e-12], [1, 0]) < 1e-10
    with pytest.raises(ValueError):
        normalized_entropy([0.3, 0.4], [0, 0])


def test_ece_examples():
    assert ece([0.0, 1.0, 1.0], [0, 1, 1]) == 0.0
    assert ece([0.7] * 5, [1] * 5, num_bins=1) == pytest.approx(0.3)
    with pytest.raises(ValueError):
        ece([0.5], [1], num_bins=0)


def test_oe_ratio_examples():
    out = oe_ratio([0.1, 0.1, 0.5, 0.5], [0.2 / 0.2, 0, 1, 0], ["a", "a", "b", "b"])
    assert out == {"a": pytest.approx(5.0), "b": pytest.approx(1.0)}
    assert oe_ratio([0.25, 0.25], [1, 0], ["g", "g"])["g"] == 2.0
    assert math.isnan(oe_ratio([0.0, 0.0], [1, 0], ["z", "z"])["z"])
    assert list(oe_ratio([0.5] * 3, [1, 0, 1], ["10", "2", "1"])) == ["1", "2", "10"]


def test_oe_calibrated_groups_near_one():
    rng = np.random.default_rng(2)
    g = rng.integers(0, 3, 60_000)
    p = np.array([0.1, 0.3, 0.6])[g]
    y = (rng.random(60_000) < p).astype(float)
    for key, v in oe_ratio(p, y, g).items():
        rows = g == int(key)
        assert abs(v - 1) < 4 / math.sqrt(p[rows].sum())


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-1200, 600), min_size=4, max_size=60), st.integers(0, 2**31))
def test_auc_invariant_under_strictly_monotone_layer(grid, seed):
    rng = np.random.default_rng(seed)
    # a 0.01 grid keeps distinct inputs distinct after the layer
    xs = np.array(grid) / 100.0
    labels = rng.integers(0, 2, len(xs)).astype(float)
    labels[:2] = [0, 1]
    cfg = IsotonicConfig(bucket_width=0.2)
    params = IsotonicParams(rng.uniform(0.5, 2.0, (1, cfg.num_buckets)), np.zeros(1))
    z_scores = forward(xs, params, cfg)
    assert auc(z_scores, labels) == auc(xs, labels)


def test_evaluate_bundle():
    p = np.array([0.0, 1.0, 1.0, 0.0])
    y = np.array([0, 1, 1, 0.0])
    rep = evaluate(p, y, groups=["a", "a", "b", "b"], truth=y)
    assert rep.auc == 1.0 and rep.ece == 0.0 and rep.count == 4 and rep.positives == 2
    assert rep.relevance_auc == 1.0
    d = evaluate(np.full(3, 0.5), np.ones(3)).to_dict()
    assert d["auc"] is None and d["normalized_entropy"] is None and "relevance_auc" not in d
