"""Frozen-feature linear probe: one-vs-rest ridge regression solved in closed form."""

from __future__ import annotations

import numpy as np

from ._rng import make_rng


class ProbeError(ValueError):
    pass


def stratified_split(labels, split_seed: int, train_frac: float = 0.7):
    """Per class, shuffle with ``split_seed`` and send ``round(train_frac * n_c)`` to train.

    Every class keeps at least one sample on each side.
    """
    labels = np.asarray(labels)
    train, test = [], []
    for c in np.unique(labels):
        idx = np.nonzero(labels == c)[0]
        idx = idx[make_rng(split_seed, int(c)).permutation(idx.size)]
        k = min(max(int(round(train_frac * idx.size)), 1), idx.size - 1)
        train.append(idx[:k])
        test.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def fit_ridge(X: np.ndarray, y: np.ndarray, classes: np.ndarray, ridge: float):
    """Standardize, then solve ``(Xc'Xc + ridge I) W = Xc'Yc`` with an unpenalized bias."""
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std == 0.0] = 1.0
    Xs = (X - mean) / std
    Y = (y[:, None] == classes[None, :]).astype(np.float64)
    y_mean = Y.mean(axis=0)
    W = np.linalg.solve(Xs.T @ Xs + ridge * np.eye(X.shape[1]), Xs.T @ (Y - y_mean))
    return mean, std, W, y_mean


def predict_ridge(model, X: np.ndarray, classes: np.ndarray) -> np.ndarray:
    mean, std, W, bias = model
    scores = ((X - mean) / std) @ W + bias
    return classes[np.argmax(scores, axis=1)]


def linear_probe(features, labels, split_seed: int = 0, ridge: float = 1e-2) -> float:
    """Test accuracy of a linear classifier fit on a 70/30 stratified split."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ProbeError(f"need one feature row per label, got {X.shape} and {y.shape}")
    classes, counts = np.unique(y, return_counts=True)
    if classes.size < 2:
        raise ProbeError("probe needs at least two classes")
    if counts.min() < 4:
        raise ProbeError(f"every class needs >= 4 samples, smallest has {counts.min()}")
    if not np.all(np.isfinite(X)):
        raise ProbeError("features must be finite")
    train, test = stratified_split(y, split_seed)
    model = fit_ridge(X[train], y[train], classes, ridge)
    return float(np.mean(predict_ridge(model, X[test], classes) == y[test]))
