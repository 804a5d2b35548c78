import math

import numpy as np
import pytest
from scipy.special import expit

from ctrstack.errors import ConfigError, DimensionError
from ctrstack.metrics import nll
from ctrstack.treeboost import (
    BoostConfig,
    GbdtModel,
    ObliviousTree,
    StackedInput,
    bin_codes,
    build_bins,
    fit_tree,
    predict_gbdt,
    stack,
    train_gbdt,
)
from gbdt_fixtures import fixtures

FIXTURES = fixtures()


def stump_oracle(g, h, X, thresholds, lam):
    """Try every (feature, threshold) with plain masks; first maximum wins."""
    def score(mask):
        return g[mask].sum() ** 2 / (h[mask].sum() + lam)

    everything = np.ones(g.size, bool)
    best = (-math.inf, None, None)
    for f, thr in enumerate(thresholds):
        for t in thr:
            left = X[:, f] <= t
            gain = score(left) + score(~left) - score(everything)
            if gain > best[0]:
                best = (gain, f, t)
    return best


def naive_leaf(tree, row):
    idx = 0
    for f, t in zip(tree.features, tree.thresholds):
        idx = idx * 2 + (1 if row[f] > t else 0)
    return idx


class TestBins:
    def test_median_boundary(self):
        assert build_bins(np.array([[1.0], [2.0], [3.0], [4.0]]), 2)[0].tolist() == [2.0]

    def test_constant_column(self):
        assert build_bins(np.full((10, 1), 3.0), 8)[0].size == 0

    def test_sort_oracle(self, rng):
        col = rng.normal(size=1000).round(1)
        v = sorted(col.tolist())
        expected = sorted({v[(k * 999) // 32] for k in range(1, 32)} - {v[-1]})
        assert build_bins(col[:, None], 32)[0].tolist() == expected

    def test_codes_agree_with_thresholds(self, rng):
        X = rng.normal(size=(200, 2))
        thr = build_bins(X, 8)
        codes = bin_codes(X, thr)
        for j in range(2):
            for i in range(200):
                assert codes[i, j] == sum(t < X[i, j] for t in thr[j])

    def test_nan_rejected(self):
        with pytest.raises(ConfigError):
            build_bins(np.array([[1.0], [np.nan]]), 4)


class TestFitTree:
    @pytest.mark.parametrize("name", sorted(FIXTURES))
    def test_stump_oracle(self, name):
        X, y = FIXTURES[name]
        p = np.full(y.size, y.mean())
        g, h = p - y, p * (1 - p)
        thr = build_bins(X, 16)
        tree = fit_tree(g, h, X, thr, 1, 1.0)
        gain, f, t = stump_oracle(g, h, X, thr, 1.0)
        if gain > 0:
            assert (tree.features, tree.thresholds) == ([f], [t])
            left = X[:, f] <= t
            expected = [-g[m].sum() / (h[m].sum() + 1.0) for m in (left, ~left)]
            assert tree.leaf_values == pytest.approx(expected, rel=1e-12)
        else:
            assert tree.depth == 0

    def test_zero_gradients(self, rng):
        X = rng.normal(size=(50, 2))
        tree = fit_tree(np.zeros(50), np.full(50, 0.25), X, build_bins(X, 8), 3, 1.0)
        assert tree.depth == 0 and tree.leaf_values.tolist() == [0.0]

    def test_perfect_feature_chosen(self):
        X, y = FIXTURES["separable"]
        g, h = 0.5 - y, np.full(y.size, 0.25)
        tree = fit_tree(g, h, X, build_bins(X, 32), 2, 1.0)
        assert tree.features[0] == 1

    def test_tie_lowest_feature(self):
        X = np.array([[0.0, 0.0], [1.0, 1.0]] * 5)
        g = np.array([1.0, -1.0] * 5)
        tree = fit_tree(g, np.ones(10), X, build_bins(X, 2), 1, 1.0)
        assert tree.features == [0]

    def test_structure(self):
        X, y = FIXTURES["gaussian"]
        p = np.full(y.size, y.mean())
        tree = fit_tree(p - y, p * (1 - p), X, build_bins(X, 32), 4, 1.0)
        thr = build_bins(X, 32)
        assert tree.depth == 4 and tree.leaf_values.size == 16
        assert all(t in thr[f] for f, t in zip(tree.features, tree.thresholds))

    def test_negative_hessian(self):
        with pytest.raises(ConfigError):
            fit_tree(np.zeros(2), np.array([1.0, -1.0]), np.zeros((2, 1)), [np.array([])], 1, 1.0)


class TestLeafIndex:
    def test_matches_naive_traversal(self, rng):
        tree = ObliviousTree([2, 0, 4, 1, 2, 3], rng.normal(size=6).tolist(), rng.normal(size=64))
        X = rng.normal(size=(2000, 5))
        X[:10, 2] = tree.thresholds[0]  # exact ties go left
        fast = tree.leaf_index(X)
        assert fast.tolist() == [naive_leaf(tree, row) for row in X]


class TestTrain:
    def test_initial_score(self):
        X = np.arange(20.0)[:, None]
        y = np.r_[np.ones(2), np.zeros(18)]
        m = train_gbdt(X, y, BoostConfig(n_trees=1))
        assert m.f0 == pytest.approx(math.log(1 / 9))
        assert round(m.f0, 6) == -2.197225

    def test_zero_trees_invalid(self):
        with pytest.raises(ConfigError):
            train_gbdt(np.zeros((4, 1)), [0, 1, 0, 1], BoostConfig(n_trees=0))

    def test_single_class(self):
        with pytest.raises(ConfigError, match="single class"):
            train_gbdt(np.zeros((4, 1)), [1, 1, 1, 1])

    def test_one_round_improves(self):
        X, y = FIXTURES["gaussian"]
        m = train_gbdt(X, y, BoostConfig(n_trees=1, depth=1))
        h = m.meta["train_nll_history"]
        assert h[1] < h[0]

    @pytest.mark.parametrize("name", sorted(FIXTURES))
    def test_monotone_training_loss(self, name):
        X, y = FIXTURES[name]
        h = train_gbdt(X, y, BoostConfig(n_trees=100)).meta["train_nll_history"]
        assert all(b <= a for a, b in zip(h, h[1:]))

    def test_history_matches_predictions(self):
        X, y = FIXTURES["mixed"]
        m = train_gbdt(X, y, BoostConfig(n_trees=10, depth=3))
        assert m.meta["train_nll_history"][-1] == pytest.approx(nll(m.predict(X), y), rel=1e-12)

    def test_deterministic(self):
        X, y = FIXTURES["gaussian"]
        a = train_gbdt(X, y, BoostConfig(n_trees=5))
        b = train_gbdt(X, y, BoostConfig(n_trees=5))
        assert np.array_equal(a.predict(X), b.predict(X))


class TestPredict:
    def test_empty_ensemble(self):
        m = GbdtModel(-1.0, [], 0.1, 2)
        assert predict_gbdt(m, [3.0, 4.0]) == pytest.approx(expit(-1.0))

    def test_hand_stump(self):
        m = GbdtModel(0.2, [ObliviousTree([1], [0.5], np.array([-1.0, 2.0]))], 0.1, 2)
        assert predict_gbdt(m, [9.0, 0.5]) == pytest.approx(expit(0.2 - 0.1))
        assert predict_gbdt(m, [9.0, 0.7]) == pytest.approx(expit(0.2 + 0.2))

    def test_batch_equals_rows(self):
        X, y = FIXTURES["mixed"]
        m = train_gbdt(X, y, BoostConfig(n_trees=10, depth=3))
        assert m.predict(X).tolist() == [predict_gbdt(m, row) for row in X]

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            predict_gbdt(GbdtModel(0.0, [], 0.1, 2), [1.0])

    def test_save_load(self, tmp_path):
        X, y = FIXTURES["gaussian"]
        m = train_gbdt(X, y, BoostConfig(n_trees=7, depth=3), columns=["a", "b", "c"])
        m.save(tmp_path / "g.model")
        back = GbdtModel.load(tmp_path / "g.model")
        assert np.array_equal(back.predict(X), m.predict(X)) and back.columns == ["a", "b", "c"]


class TestStack:
    def test_no_columns_is_baseline(self, rng):
        X = rng.normal(size=(5, 3))
        s = stack(X, [])
        assert np.array_equal(s.matrix, X) and s.columns == ["f0", "f1", "f2"]

    def test_appends_in_order(self, rng):
        X = rng.normal(size=(4, 1))
        s = stack(X, [("ann", np.full(4, 0.2)), ("lr", np.full(4, 0.3))], ["x"])
        assert s.columns == ["x", "ann", "lr"] and s.matrix[0, 1:].tolist() == [0.2, 0.3]

    def test_length_mismatch(self, rng):
        with pytest.raises(DimensionError):
            stack(rng.normal(size=(4, 1)), [("ann", np.full(3, 0.2))])

    def test_range(self, rng):
        with pytest.raises(ConfigError):
            stack(rng.normal(size=(2, 1)), [("ann", np.array([0.2, 1.0]))])

    def test_constant_column_changes_nothing(self):
        X, y = FIXTURES["gaussian"]
        cfg = BoostConfig(n_trees=20, depth=3)
        base = train_gbdt(X, y, cfg).predict(X)
        aug = stack(X, [("const", np.full(y.size, 0.3))]).matrix
        assert np.array_equal(train_gbdt(aug, y, cfg).predict(aug), base)

    def test_csv_round_trip(self, tmp_path, rng):
        s = stack(rng.normal(size=(6, 2)), [("ann", rng.uniform(0.1, 0.9, 6))], ["a", "b"])
        labels = np.array([0, 1, 0, 0, 1, 1])
        s.write_csv(tmp_path / "s.csv", labels)
        back, lab = StackedInput.read_csv(tmp_path / "s.csv")
        assert np.array_equal(back.matrix, s.matrix) and back.columns == s.columns
        assert np.array_equal(lab, labels)
