"""Shared per-point MLP, pooling and projection head with manual backprop.

Layout::

    points (n, 3) --trunk (affine + ReLU)*--> F (n, d) --max/mean pool--> (d,)
        --head (affine, ReLU between layers)--> z (d_proj,)

Each point goes through the trunk independently. Internally the rows are
processed in a canonical (lexicographic) order and scattered back, so every
output row is bit-for-bit independent of where the point sat in the input.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ._rng import make_rng
from .pointcloud import PointCloud


class EncoderError(ValueError):
    pass


@dataclass
class EncoderParams:
    """Weights ``W`` are stored ``(out, in)``; a layer computes ``x @ W.T + b``."""

    trunk: list[tuple[np.ndarray, np.ndarray]]
    head: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    pooling: str = "max"

    def __post_init__(self):
        if self.pooling not in ("max", "mean"):
            raise EncoderError(f"pooling must be 'max' or 'mean', got {self.pooling!r}")
        if not self.trunk:
            raise EncoderError("trunk needs at least one layer")
        prev = 3
        for W, b in self.trunk + self.head:
            if W.ndim != 2 or W.shape[1] != prev or b.shape != (W.shape[0],):
                raise EncoderError(f"layer shapes do not chain: W{W.shape}, b{b.shape}, input {prev}")
            prev = W.shape[0]

    @property
    def trunk_widths(self) -> tuple[int, ...]:
        return (3,) + tuple(W.shape[0] for W, _ in self.trunk)

    @property
    def head_widths(self) -> tuple[int, ...]:
        return (self.feature_dim,) + tuple(W.shape[0] for W, _ in self.head)

    @property
    def feature_dim(self) -> int:
        return self.trunk[-1][0].shape[0]

    def arrays(self) -> list[np.ndarray]:
        """All parameter arrays in layer order: trunk (W, b)..., head (W, b)..."""
        out = []
        for W, b in self.trunk + self.head:
            out.extend((W, b))
        return out

    def num_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def flat(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self.arrays()])

    def with_flat(self, vec: np.ndarray) -> "EncoderParams":
        """Same shapes as ``self`` filled from a flat vector."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.num_params():
            raise EncoderError(f"expected {self.num_params()} values, got {vec.size}")
        arrays, pos = [], 0
        for a in self.arrays():
            arrays.append(vec[pos : pos + a.size].reshape(a.shape).copy())
            pos += a.size
        pairs = list(zip(arrays[0::2], arrays[1::2]))
        nt = len(self.trunk)
        return EncoderParams(pairs[:nt], pairs[nt:], self.pooling)

    def zeros_like(self) -> "EncoderParams":
        return self.with_flat(np.zeros(self.num_params()))

    def copy(self) -> "EncoderParams":
        return self.with_flat(self.flat())


def _check_widths(widths: Sequence[int], name: str) -> tuple[int, ...]:
    out = tuple(int(w) for w in widths)
    if len(out) < 1 or any(w < 1 for w in out):
        raise EncoderError(f"{name} widths must be positive integers, got {widths!r}")
    return out


def count_params(trunk: Sequence[int], head: Sequence[int] = ()) -> int:
    total = 0
    for widths in (trunk, head):
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            total += fan_in * fan_out + fan_out
    return total


def init_params(
    trunk: Sequence[int] = (3, 64, 64),
    head: Sequence[int] = (64, 64, 32),
    seed: int = 0,
    pooling: str = "max",
) -> EncoderParams:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases.

    ``head`` starts with the trunk's output width; ``head=(d,)`` means no
    projection layers.
    """
    trunk = _check_widths(trunk, "trunk")
    head = _check_widths(head, "head") if head else (trunk[-1],)
    if trunk[0] != 3 or len(trunk) < 2:
        raise EncoderError(f"trunk must start at 3 and have at least one layer, got {trunk}")
    if head[0] != trunk[-1]:
        raise EncoderError(f"head input {head[0]} does not match trunk output {trunk[-1]}")

    def layers(widths, offset):
        out = []
        for k, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            W = make_rng(seed, offset + k).uniform(-bound, bound, size=(fan_out, fan_in))
            out.append((W, np.zeros(fan_out)))
        return out

    return EncoderParams(layers(trunk, 0), layers(head, len(trunk)), pooling)


# ---------------------------------------------------------------------------
# Trunk
# ---------------------------------------------------------------------------


@dataclass
class TrunkCache:
    order: np.ndarray  # canonical row order used internally
    inputs: list[np.ndarray]  # input to each layer, canonical order
    pre: list[np.ndarray]  # pre-activations, canonical order


def _points(pc) -> np.ndarray:
    return pc.points if isinstance(pc, PointCloud) else np.asarray(pc, dtype=np.float64)


def forward_cached(params: EncoderParams, pc) -> tuple[np.ndarray, TrunkCache]:
    pts = _points(pc)
    order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))
    x = pts[order]
    inputs, pre = [], []
    for W, b in params.trunk:
        inputs.append(x)
        h = x @ W.T + b
        pre.append(h)
        x = np.maximum(h, 0.0)
    if not np.all(np.isfinite(x)):
        raise EncoderError("non-finite features; parameters have diverged")
    feats = np.empty_like(x)
    feats[order] = x
    return feats, TrunkCache(order, inputs, pre)


def forward(params: EncoderParams, pc) -> np.ndarray:
    """Per-point features, one row per input point."""
    return forward_cached(params, pc)[0]


def trunk_backward(params: EncoderParams, cache: TrunkCache, d_feats: np.ndarray):
    """Gradients of the trunk layers given ``dL/dF`` (rows in input order)."""
    grad = np.asarray(d_feats, dtype=np.float64)[cache.order]
    grads = [None] * len(params.trunk)
    for k in range(len(params.trunk) - 1, -1, -1):
        W, _ = params.trunk[k]
        grad = grad * (cache.pre[k] > 0.0)
        grads[k] = (grad.T @ cache.inputs[k], grad.sum(axis=0))
        if k:
            grad = grad @ W
    return grads


# ---------------------------------------------------------------------------
# Pool + projection
# ---------------------------------------------------------------------------


@dataclass
class HeadCache:
    n_rows: int
    argmax: np.ndarray | None
    inputs: list[np.ndarray]
    pre: list[np.ndarray]


def pool_project_cached(params: EncoderParams, feats: np.ndarray) -> tuple[np.ndarray, HeadCache]:
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise EncoderError("cannot pool an empty feature matrix")
    if params.pooling == "max":
        argmax = np.argmax(feats, axis=0)  # first maximal row wins ties
        x = feats[argmax, np.arange(feats.shape[1])]
    else:
        argmax = None
        x = feats.mean(axis=0)
    inputs, pre = [], []
    last = len(params.head) - 1
    for k, (W, b) in enumerate(params.head):
        inputs.append(x)
        h = W @ x + b
        pre.append(h)
        x = h if k == last else np.maximum(h, 0.0)
    return x, HeadCache(feats.shape[0], argmax, inputs, pre)


def pool(params: EncoderParams, feats: np.ndarray) -> np.ndarray:
    """Pooled feature vector before the projection head."""
    feats = np.asarray(feats, dtype=np.float64)
    return feats.max(axis=0) if params.pooling == "max" else feats.mean(axis=0)


def pool_project(params: EncoderParams, feats: np.ndarray) -> np.ndarray:
    return pool_project_cached(params, feats)[0]


def head_backward(params: EncoderParams, cache: HeadCache, d_z: np.ndarray):
    """Returns ``(head grads, dL/dF)``; max-pool routes each coordinate to its argmax row."""
    grad = np.asarray(d_z, dtype=np.float64)
    grads = [None] * len(params.head)
    last = len(params.head) - 1
    for k in range(last, -1, -1):
        W, _ = params.head[k]
        if k != last:
            grad = grad * (cache.pre[k] > 0.0)
        grads[k] = (np.outer(grad, cache.inputs[k]), grad.copy())
        grad = W.T @ grad
    d = grad.shape[0]
    d_feats = np.zeros((cache.n_rows, d))
    if params.pooling == "max":
        d_feats[cache.argmax, np.arange(d)] = grad
    else:
        d_feats[:] = grad / cache.n_rows
    return grads, d_feats


def encode(params: EncoderParams, pc) -> np.ndarray:
    """Latent ``z`` for a cloud."""
    return pool_project(params, forward(params, pc))


def backward(params: EncoderParams, pc, d_z: np.ndarray) -> EncoderParams:
    """Exact gradient of ``<d_z, z(pc)>`` with respect to every parameter."""
    d_z = np.asarray(d_z, dtype=np.float64)
    feats, tcache = forward_cached(params, pc)
    z, hcache = pool_project_cached(params, feats)
    if d_z.shape != z.shape:
        raise EncoderError(f"upstream gradient shape {d_z.shape} does not match z {z.shape}")
    head_grads, d_feats = head_backward(params, hcache, d_z)
    return EncoderParams(trunk_backward(params, tcache, d_feats), head_grads, params.pooling)
