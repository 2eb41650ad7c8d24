import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ltescene.forest import Forest, ForestConfig, predict_proba, train_forest


def blobs(seed=7, n=200):
    rng = np.random.default_rng(seed)
    X = np.vstack([rng.normal(-2, 1, (n // 2, 2)), rng.normal(2, 1, (n // 2, 2))])
    return X, [0] * (n // 2) + [1] * (n // 2)


def stump(value, feature=0, threshold=0.0):
    """One-split tree: left leaf 1, right leaf 2."""
    return dict(
        feature=[feature, -1, -1], threshold=[threshold, 0, 0], left=[1, -1, -1], right=[2, -1, -1], value=value
    )


def hand_forest(trees, classes=("a", "b"), n_features=1):
    cat = lambda k, dt: np.concatenate([np.asarray(t[k], dtype=dt) for t in trees])
    sizes = [len(t["feature"]) for t in trees]
    return Forest(list(classes), n_features, cat("feature", int), cat("threshold", float), cat("left", int),
                  cat("right", int), np.vstack([t["value"] for t in trees]), np.concatenate([[0], np.cumsum(sizes)]))


def test_separable_blobs_training_accuracy():
    X, y = blobs()
    f = train_forest(X, y, ForestConfig(n_trees=50, rng_seed=7))
    assert np.mean(np.array(f.predict(X)) == np.array(y)) >= 0.99


def test_tree_count():
    X, y = blobs(n=40)
    assert train_forest(X, y, ForestConfig(n_trees=200)).n_trees == 200


def test_seed_determinism():
    X, y = blobs(n=60)
    cfg = ForestConfig(n_trees=20, rng_seed=3)
    a, b = train_forest(X, y, cfg), train_forest(X, y, cfg)
    assert a.to_bytes() == b.to_bytes()
    Xq = np.random.default_rng(1).normal(size=(50, 2))
    np.testing.assert_array_equal(a.predict_proba(Xq), b.predict_proba(Xq))
    c = train_forest(X, y, cfg.replace(rng_seed=4))
    assert c.to_bytes() != a.to_bytes()


def test_single_leaf_tree_returns_its_histogram():
    leaf = dict(feature=[-1], threshold=[0.0], left=[-1], right=[-1], value=[[0.3, 0.7]])
    f = hand_forest([leaf])
    np.testing.assert_allclose(predict_proba(f, np.array([5.0])), [0.3, 0.7])


def test_three_tree_hand_average():
    t1 = stump([[0, 0], [1, 0], [0, 1]])
    t2 = stump([[0, 0], [1, 0], [0, 1]], threshold=1.0)
    t3 = stump([[0, 0], [1, 0], [0, 1]], threshold=-1.0)
    f = hand_forest([t1, t2, t3])
    # x = -0.5: left, left, right
    np.testing.assert_allclose(f.predict_proba(np.array([-0.5])), [2 / 3, 1 / 3])


def test_degenerate_labels_rejected():
    with pytest.raises(ValueError, match="degenerate label set"):
        train_forest(np.zeros((5, 2)), ["a"] * 5)
    with pytest.raises(ValueError):
        train_forest(np.zeros((1, 2)), ["a"])


def test_dimension_mismatch():
    X, y = blobs(n=20)
    f = train_forest(X, y, ForestConfig(n_trees=2))
    with pytest.raises(ValueError, match="dimension mismatch"):
        f.predict_proba(np.zeros(3))


def test_probabilities_sum_to_one_on_many_inputs():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(300, 5))
    y = rng.integers(0, 4, 300)
    f = train_forest(X, y, ForestConfig(n_trees=25, rng_seed=1))
    P = f.predict_proba(rng.normal(scale=3, size=(10_000, 5)))
    assert P.shape == (10_000, 4)
    assert np.all(P >= 0)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 4))
def test_fully_grown_tree_memorises_training_points(seed, k):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(30, 3))
    y = rng.integers(0, k, 30)
    y[:k] = np.arange(k)
    cfg = ForestConfig(n_trees=3, bootstrap=False, features_per_split=3, rng_seed=seed)
    f = train_forest(X, y, cfg)
    pred = np.array(f.predict(X))
    np.testing.assert_array_equal(pred, y)


def test_leaf_histograms_are_distributions():
    X, y = blobs(n=80)
    f = train_forest(X, y, ForestConfig(n_trees=10, min_leaf=5))
    np.testing.assert_allclose(f.value.sum(axis=1), 1.0)
    for t in range(f.n_trees):
        feat, thr, left, right, _ = f.tree_arrays(t)
        leaves = left == -1
        assert np.all(right[leaves] == -1) and np.all(feat[~leaves] >= 0)


def _best_gini_split(X, y, k):
    """Brute force over every feature and midpoint; ties -> lowest feature, then lowest threshold."""
    best = None
    for f in range(X.shape[1]):
        vals = np.unique(X[:, f])
        for lo, hi in zip(vals[:-1], vals[1:]):
            thr = (lo + hi) / 2
            m = X[:, f] <= thr
            def gini(lab):
                p = np.bincount(lab, minlength=k) / len(lab)
                return 1 - np.sum(p**2)
            score = (m.sum() * gini(y[m]) + (~m).sum() * gini(y[~m])) / len(y)
            if best is None or score < best[0] - 1e-12:
                best = (score, f, thr)
    return best


def test_root_split_matches_brute_force_gini():
    rng = np.random.default_rng(12)
    for _ in range(10):
        X = np.round(rng.normal(size=(40, 4)), 1)
        y = rng.integers(0, 3, 40)
        f = train_forest(X, y, ForestConfig(n_trees=1, bootstrap=False, features_per_split=4, max_depth=1))
        feat, thr, *_ = f.tree_arrays(0)
        _, bf, bt = _best_gini_split(X, y, 3)
        assert (feat[0], thr[0]) == (bf, pytest.approx(bt))


def test_laplace_smoothing_keeps_leaves_nonzero():
    X, y = blobs(n=40)
    f = train_forest(X, y, ForestConfig(n_trees=5, laplace_alpha=1.0))
    assert np.all(f.value > 0)


def test_serialization_round_trip():
    X, y = blobs(n=40)
    f = train_forest(X, ["neg" if v == 0 else "pos" for v in y], ForestConfig(n_trees=5))
    g = Forest.from_bytes(f.to_bytes())
    assert g.classes == ["neg", "pos"] and g.config == f.config
    np.testing.assert_array_equal(g.predict_proba(X), f.predict_proba(X))


def test_config_validation():
    with pytest.raises(ValueError):
        ForestConfig(n_trees=0)
    with pytest.raises(ValueError):
        ForestConfig(min_leaf=0)
