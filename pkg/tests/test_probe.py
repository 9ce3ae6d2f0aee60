import numpy as np
import pytest

from guidedcontrast.probe import ProbeError, fit_ridge, linear_probe, predict_ridge, stratified_split


class TestSplit:
    def test_stratified_70_30(self):
        labels = np.repeat([0, 1, 2], 20)
        train, test = stratified_split(labels, 0)
        assert np.bincount(labels[train]).tolist() == [14, 14, 14]
        assert np.bincount(labels[test]).tolist() == [6, 6, 6]
        assert set(train) | set(test) == set(range(60)) and not set(train) & set(test)

    def test_deterministic(self):
        labels = np.repeat([0, 1], 10)
        a = stratified_split(labels, 4)
        b = stratified_split(labels, 4)
        np.testing.assert_array_equal(a[0], b[0])
        assert not np.array_equal(a[0], stratified_split(labels, 5)[0])


class TestLinearProbe:
    def test_separable(self):
        rng = np.random.default_rng(0)
        X = np.concatenate([rng.normal(-5, 1, size=(30, 4)), rng.normal(5, 1, size=(30, 4))])
        y = np.repeat([0, 1], 30)
        assert linear_probe(X, y) == 1.0

    def test_shuffled_labels_near_chance(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(200, 8))
        accs = []
        for seed in range(10):
            y = np.random.default_rng(seed).permutation(np.repeat(np.arange(4), 50))
            accs.append(linear_probe(X, y, split_seed=seed))
        assert abs(np.mean(accs) - 0.25) <= 0.15

    def test_identical_features_majority_rate(self):
        y = np.array([0] * 20 + [1] * 10)
        X = np.ones((30, 3))
        train, test = stratified_split(y, 0)
        majority = np.mean(y[test] == 0)
        assert linear_probe(X, y) == pytest.approx(majority)

    def test_ridge_matches_lstsq(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(40, 3)) * [1.0, 10.0, 0.1] + 2.0
        y = rng.integers(0, 3, 40)
        classes = np.arange(3)
        mean, std, W, bias = fit_ridge(X, y, classes, 1e-2)
        Xs = (X - mean) / std
        A = np.column_stack([Xs, np.ones(40)])
        Y = (y[:, None] == classes).astype(float)
        reg = np.diag([1e-2] * 3 + [0.0])  # bias unpenalized
        ref = np.linalg.solve(A.T @ A + reg, A.T @ Y)
        np.testing.assert_allclose(W, ref[:3], rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(bias, ref[3], rtol=1e-10, atol=1e-12)
        assert predict_ridge((mean, std, W, bias), X, classes).shape == (40,)

    @pytest.mark.parametrize(
        "X,y",
        [
            (np.ones((10, 2)), np.zeros(10)),
            (np.ones((6, 2)), np.array([0, 0, 0, 1, 1, 1])),
            (np.ones((10, 2)), np.zeros(9)),
            (np.full((10, 2), np.nan), np.repeat([0, 1], 5)),
        ],
    )
    def test_degenerate(self, X, y):
        with pytest.raises(ProbeError):
            linear_probe(X, y)

    def test_accuracy_in_unit_interval(self):
        rng = np.random.default_rng(3)
        acc = linear_probe(rng.normal(size=(40, 5)), np.repeat([0, 1, 2, 3], 10))
        assert 0.0 <= acc <= 1.0
