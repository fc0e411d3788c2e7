import math

import numpy as np
import pytest
from sklearn.base import clone

from published_transfer import ROWS
from trexlab.data import TEST, TRAIN, VAL
from trexlab.probe import (FeatureSet, LogisticProbe, ProbeConfig, is_clamped, linear_probe, log_odds,
                           mean_log_odds)

FAST = ProbeConfig(trials=4, seeds=1, epochs=30)


def blobs(n_per, c, d, seed=0, spread=0.05):
    rng = np.random.default_rng(seed)
    centers = np.eye(c, d) * 3
    labels = np.repeat(np.arange(c), n_per)
    x = centers[labels] + spread * rng.normal(size=(len(labels), d))
    splits = rng.choice([TRAIN, TRAIN, TRAIN, TEST], size=len(labels))
    return x, labels, splits


@pytest.mark.parametrize("name", sorted(ROWS))
def test_published_mean_log_odds(name):
    _, accs, expected = ROWS[name]
    assert abs(mean_log_odds([a / 100 for a in accs]) - expected) <= 0.01


def test_log_odds_values():
    assert log_odds(0.5) == 0.0
    for p in np.linspace(0.01, 0.99, 50):
        assert abs(log_odds(p) + log_odds(1 - p)) < 1e-12
    assert log_odds(0.75) == pytest.approx(math.log(3))
    with pytest.raises(ValueError):
        log_odds(1.0)
    with pytest.raises(ValueError):
        log_odds(1.2)
    assert log_odds(1.0, n_test=100) == pytest.approx(math.log(199))
    assert log_odds(0.0, n_test=100) == pytest.approx(-math.log(199))
    assert is_clamped(1.0, 100) and not is_clamped(0.9, 100)


def test_separable_features_probe_perfectly():
    x, y, s = blobs(40, 5, 8)
    res = linear_probe(FeatureSet(x, y, s, 5), FAST)
    assert res.accuracy == 1.0
    assert FAST.lr_range[0] <= res.lr <= FAST.lr_range[1]


def test_shuffled_labels_at_chance():
    rng = np.random.default_rng(1)
    n, c = 1200, 4
    x = rng.normal(size=(n, 16))
    y = rng.integers(0, c, n)
    s = np.where(np.arange(n) < 600, TRAIN, TEST)
    res = linear_probe(FeatureSet(x, y, s, c), FAST)
    assert res.n_test >= 500
    sigma = math.sqrt((1 / c) * (1 - 1 / c) / res.n_test)
    assert abs(res.accuracy - 1 / c) <= 3 * sigma


def test_probe_scale_invariant_with_l2():
    x, y, s = blobs(30, 3, 6, spread=1.0)
    a = linear_probe(FeatureSet(x, y, s, 3), FAST)
    b = linear_probe(FeatureSet(7.5 * x, y, s, 3), FAST)
    assert a.per_seed == pytest.approx(b.per_seed)
    assert a.chosen == b.chosen


def test_probe_deterministic_and_uses_fixed_val():
    x, y, s = blobs(30, 3, 6, spread=1.5)
    fs = FeatureSet(x, y, s, 3)
    assert linear_probe(fs, FAST, seed=3).per_seed == linear_probe(fs, FAST, seed=3).per_seed
    s2 = s.copy()
    s2[np.flatnonzero(s == TRAIN)[::5]] = VAL
    res = linear_probe(FeatureSet(x, y, s2, 3), ProbeConfig(trials=3, seeds=2, epochs=10))
    assert len(res.per_seed) == 2 and len(res.chosen) == 2


def test_probe_errors():
    x, y, s = blobs(10, 3, 4)
    with pytest.raises(ValueError, match="no test"):
        linear_probe(FeatureSet(x, y, np.full(len(y), TRAIN), 3), FAST)
    s2 = s.copy()
    s2[y == 2] = TEST
    with pytest.raises(ValueError, match="no training"):
        linear_probe(FeatureSet(x, y, s2, 3), FAST)
    with pytest.raises(ValueError):
        ProbeConfig(lr_range=(1.0, 0.1))


def test_logistic_probe_estimator_api():
    x, y, _ = blobs(20, 3, 5)
    labels = np.array(["a", "b", "c"])[y]
    est = LogisticProbe(lr=1.0, epochs=50)
    assert clone(est).get_params() == est.get_params()
    est.fit(x, labels)
    assert est.score(x, labels) == 1.0
    p = est.predict_proba(x)
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    with pytest.raises(ValueError):
        est.fit(x[:, :, None], labels)
