"""Novelty-guided augmentation sampling backed by an episodic memory bank.

Candidates are scored by ``1 / (sqrt(sum_m K(a_m, a)) + c)`` with the kernel
``K = eps / (d + eps)`` over every stored augmentation ``a_m``; the highest
scoring candidate is selected and written back to the bank.
"""

from __future__ import annotations

import math
from typing import Iterable, Optional, Sequence

import numpy as np

from ._rng import derive_seed
from .augmentation import (
    AugRanges,
    Augmentation,
    distances_to_many,
    pairwise_distances,
    normalized_params,
    sample_random,
)

DEFAULT_WEIGHTS = (1.0, 1.0, 1.0)


class AugMemoryBank:
    """FIFO store of explored augmentations.

    The normalized parameter vectors are kept contiguous and in insertion
    order, so sums over the bank are reproducible after a save/load cycle.
    """

    def __init__(
        self,
        capacity: int = 35000,
        epsilon: float = 1e-3,
        c: float = 1e-3,
        ranges: AugRanges = AugRanges(),
        weights: Sequence[float] = DEFAULT_WEIGHTS,
    ):
        if capacity < 1:
            raise ValueError(f"bank capacity must be >= 1, got {capacity}")
        if not (epsilon > 0 and c > 0):
            raise ValueError("epsilon and c must be positive")
        self.capacity = int(capacity)
        self.epsilon = float(epsilon)
        self.c = float(c)
        self.ranges = ranges
        self.weights = tuple(float(w) for w in weights)
        self._entries: list[Augmentation] = []
        self._buf = np.empty((2 * self.capacity, 9))
        self._head = 0

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def entries(self) -> tuple[Augmentation, ...]:
        return tuple(self._entries)

    @property
    def vectors(self) -> np.ndarray:
        """Normalized parameters of the stored entries, oldest first."""
        return self._buf[self._head : self._head + len(self._entries)]

    def add(self, aug: Augmentation) -> None:
        vec = normalized_params(aug, self.ranges)
        if len(self._entries) == self.capacity:
            self._entries.pop(0)
            self._head += 1
        tail = self._head + len(self._entries)
        if tail == self._buf.shape[0]:
            live = len(self._entries)
            self._buf[:live] = self._buf[self._head : tail]
            self._head, tail = 0, live
        self._buf[tail] = vec
        self._entries.append(aug)

    def to_records(self) -> list[dict]:
        return [a.to_dict() for a in self._entries]

    @classmethod
    def from_records(cls, records: Iterable[dict], **kwargs) -> "AugMemoryBank":
        bank = cls(**kwargs)
        for rec in records:
            bank.add(Augmentation.from_dict(rec))
        return bank


def kernel(d, epsilon: float):
    """Inverse-distance kernel ``eps / (d + eps)``; 1 at ``d = 0``."""
    if np.ndim(d) == 0:
        return epsilon / (float(d) + epsilon)
    return epsilon / (np.asarray(d, dtype=np.float64) + epsilon)


def _scores(cands: np.ndarray, bank: AugMemoryBank, weights: Sequence[float]) -> np.ndarray:
    if len(bank) == 0:
        return np.full(cands.shape[0], 1.0 / bank.c)
    k = kernel(pairwise_distances(cands, bank.vectors, weights), bank.epsilon)
    return 1.0 / (np.sqrt(np.sum(k, axis=1)) + bank.c)


def novelty_score(
    candidate: Augmentation, bank: AugMemoryBank, weights: Optional[Sequence[float]] = None
) -> float:
    vec = normalized_params(candidate, bank.ranges)[None]
    return float(_scores(vec, bank, weights or bank.weights)[0])


def most_novel(
    candidates: Sequence[Augmentation], bank: AugMemoryBank, weights=None
) -> int:
    """Index of the best-scoring candidate; ties go to the lowest index."""
    vecs = np.stack([normalized_params(a, bank.ranges) for a in candidates])
    return int(np.argmax(_scores(vecs, bank, weights or bank.weights)))


def select_novel(bank: AugMemoryBank, ranges: AugRanges, n_candidates: int, seed: int) -> Augmentation:
    """Sample ``n_candidates`` augmentations, keep the most novel, store it in ``bank``."""
    if n_candidates < 1:
        raise ValueError(f"need at least one candidate, got {n_candidates}")
    cands = [sample_random(ranges, derive_seed(seed, k)) for k in range(n_candidates)]
    best = cands[most_novel(cands, bank)]
    bank.add(best)
    return best


def pair_for_sample(
    bank: AugMemoryBank, ranges: AugRanges, n_candidates: int, seed: int
) -> tuple[Augmentation, Augmentation]:
    """Two guided draws for one cloud. The first view never carries a crop."""
    a1 = select_novel(bank, ranges, n_candidates, derive_seed(seed, 0)).without_crop()
    a2 = select_novel(bank, ranges, n_candidates, derive_seed(seed, 1))
    return a1, a2


def random_pair(ranges: AugRanges, seed: int) -> tuple[Augmentation, Augmentation]:
    """Unguided counterpart of :func:`pair_for_sample`."""
    a1 = sample_random(ranges, derive_seed(seed, 0)).without_crop()
    a2 = sample_random(ranges, derive_seed(seed, 1))
    return a1, a2


def coverage_metrics(
    samples: Sequence[Augmentation],
    weights: Sequence[float] = DEFAULT_WEIGHTS,
    ranges: AugRanges = AugRanges(),
) -> dict[str, float]:
    """Smallest and mean nearest-neighbour distance within ``samples``."""
    if len(samples) < 2:
        raise ValueError("coverage needs at least two samples")
    vecs = np.stack([normalized_params(a, ranges) for a in samples])
    nn = np.empty(len(samples))
    for start in range(0, len(samples), 256):
        d = pairwise_distances(vecs[start : start + 256], vecs, weights)
        d[np.arange(d.shape[0]), np.arange(start, start + d.shape[0])] = np.inf
        nn[start : start + d.shape[0]] = d.min(axis=1)
    return {"min_pairwise": float(nn.min()), "mean_nn": float(nn.mean())}


def explore(
    method: str,
    n_select: int,
    n_candidates: int,
    seed: int,
    ranges: AugRanges = AugRanges(),
    capacity: int = 512,
    epsilon: float = 1e-3,
    c: float = 1e-3,
    weights: Sequence[float] = DEFAULT_WEIGHTS,
) -> list[Augmentation]:
    """Draw ``n_select`` augmentations either guided (fresh bank) or uniformly."""
    if method == "guided":
        bank = AugMemoryBank(capacity, epsilon, c, ranges, weights)
        return [select_novel(bank, ranges, n_candidates, derive_seed(seed, i)) for i in range(n_select)]
    if method == "random":
        return [sample_random(ranges, derive_seed(seed, i)) for i in range(n_select)]
    raise ValueError(f"unknown exploration method {method!r}")
