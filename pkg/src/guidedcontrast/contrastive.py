"""NT-Xent objective over paired latents, with its exact gradient.

For anchor ``i`` in direction 1->2 the logits are ``sim(z1_i, z1_b)/tau`` for
``b != i`` and ``sim(z1_i, z2_b)/tau`` for every ``b``; the positive is
``sim(z1_i, z2_i)/tau``. The 2->1 direction swaps the roles of the views. The
batch loss averages both directions over the batch.
"""

from __future__ import annotations

from typing import Literal

import numpy as np

Direction = Literal["12", "21"]


class ContrastiveError(ValueError):
    pass


def _unit_rows(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalize. Dividing by the max-abs entry first makes the result
    bitwise invariant to any exactly representable rescaling of a row."""
    z = np.asarray(z, dtype=np.float64)
    peak = np.max(np.abs(z), axis=-1, keepdims=True)
    if np.any(peak == 0.0):
        raise ContrastiveError("cosine similarity is undefined for a zero vector")
    scaled = z / peak
    norm = np.sqrt(np.sum(scaled * scaled, axis=-1, keepdims=True))
    return scaled / norm, norm * peak


def cosine_sim(u, v) -> float:
    pair = np.stack([np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)])
    units, _ = _unit_rows(pair)
    return float(np.clip(units[0] @ units[1], -1.0, 1.0))


def _check(z1, z2, tau):
    z1 = np.atleast_2d(np.asarray(z1, dtype=np.float64))
    z2 = np.atleast_2d(np.asarray(z2, dtype=np.float64))
    if z1.shape != z2.shape or z1.shape[0] < 1:
        raise ContrastiveError(f"views must be aligned, got {z1.shape} and {z2.shape}")
    if not tau > 0:
        raise ContrastiveError(f"temperature must be positive, got {tau}")
    return z1, z2


def _logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))).squeeze(axis)


def _directional(u_a: np.ndarray, u_b: np.ndarray, tau: float):
    """Per-anchor losses for anchors in view ``a`` against positives in view ``b``.

    Returns the losses plus the softmax weights over same-view and cross-view
    logits (same-view diagonal weight is zero), needed for the gradient.
    """
    B = u_a.shape[0]
    same = (u_a @ u_a.T) / tau
    cross = (u_a @ u_b.T) / tau
    same_masked = same.copy()
    np.fill_diagonal(same_masked, -np.inf)
    logits = np.concatenate([same_masked, cross], axis=1)
    lse = _logsumexp(logits, axis=1)
    losses = lse - np.diag(cross)
    probs = np.exp(logits - lse[:, None])
    return losses, probs[:, :B], probs[:, B:]


def pair_losses(z1, z2, tau: float = 0.5, direction: Direction = "12") -> np.ndarray:
    z1, z2 = _check(z1, z2, tau)
    u1, _ = _unit_rows(z1)
    u2, _ = _unit_rows(z2)
    if direction == "12":
        return _directional(u1, u2, tau)[0]
    if direction == "21":
        return _directional(u2, u1, tau)[0]
    raise ContrastiveError(f"direction must be '12' or '21', got {direction!r}")


def nt_xent_pair_loss(i: int, z1, z2, tau: float = 0.5, direction: Direction = "12") -> float:
    losses = pair_losses(z1, z2, tau, direction)
    if not 0 <= i < losses.shape[0]:
        raise ContrastiveError(f"index {i} outside batch of size {losses.shape[0]}")
    return float(losses[i])


def batch_loss(z1, z2, tau: float = 0.5) -> float:
    """``(1 / 2B) * sum_b (L12_b + L21_b)``."""
    z1, z2 = _check(z1, z2, tau)
    u1, _ = _unit_rows(z1)
    u2, _ = _unit_rows(z2)
    l12 = _directional(u1, u2, tau)[0]
    l21 = _directional(u2, u1, tau)[0]
    return float((np.sum(l12) + np.sum(l21)) / (2 * z1.shape[0]))


def loss_and_grad(z1, z2, tau: float = 0.5) -> tuple[float, np.ndarray, np.ndarray]:
    """Batch loss and its gradients with respect to ``z1`` and ``z2``."""
    z1, z2 = _check(z1, z2, tau)
    B = z1.shape[0]
    u1, n1 = _unit_rows(z1)
    u2, n2 = _unit_rows(z2)
    l12, s12, c12 = _directional(u1, u2, tau)
    l21, s21, c21 = _directional(u2, u1, tau)
    loss = float((np.sum(l12) + np.sum(l21)) / (2 * B))

    eye = np.eye(B)
    # dL/d(logit) = softmax - onehot(positive); same-view logits are symmetric in (i, b).
    g_same1 = s12 + s12.T
    g_same2 = s21 + s21.T
    g_cross = (c12 - eye) + (c21 - eye).T  # indexes (row of u1, row of u2)
    scale = 1.0 / (2 * B * tau)
    du1 = scale * (g_same1 @ u1 + g_cross @ u2)
    du2 = scale * (g_same2 @ u2 + g_cross.T @ u1)

    def through_norm(du, u, norm):
        radial = np.sum(du * u, axis=1, keepdims=True)
        return (du - radial * u) / norm

    return loss, through_norm(du1, u1, n1), through_norm(du2, u2, n2)


def loss_backward(z1, z2, tau: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    _, g1, g2 = loss_and_grad(z1, z2, tau)
    return g1, g2
