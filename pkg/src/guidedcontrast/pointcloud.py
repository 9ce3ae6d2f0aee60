"""Point-cloud container, XYZ text I/O, sampling and exact nearest-neighbour lookup."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy.spatial import cKDTree

from ._rng import derive_seed, make_rng

PathLike = Union[str, Path]

SHAPE_KINDS = ("plane", "sphere", "box", "cylinder")

# Relative slack used to decide when a kd-tree answer needs brute-force refinement.
_TIE_RTOL = 1e-9
_TIE_ATOL = 1e-300


class PointCloudError(ValueError):
    """Malformed point-cloud data or arguments."""


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Unordered set of ``n`` 3D points.

    Attributes:
        points: ``(n, 3)`` float64 array, meters.
        label: optional integer class id for the whole cloud.
        source_indices: optional ``(n,)`` int array mapping each point to its
            index in an ancestor cloud. Entries are unique.
    """

    points: np.ndarray
    label: Optional[int] = None
    source_indices: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise PointCloudError(f"points must have shape (n, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise PointCloudError("point cloud must contain at least one point")
        if not np.all(np.isfinite(pts)):
            raise PointCloudError("point coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.label is not None:
            object.__setattr__(self, "label", int(self.label))
        if self.source_indices is not None:
            src = np.array(self.source_indices, dtype=np.int64)
            if src.shape != (pts.shape[0],):
                raise PointCloudError(
                    f"source_indices length {src.shape} does not match n={pts.shape[0]}"
                )
            if np.unique(src).size != src.size:
                raise PointCloudError("source_indices entries must be unique")
            src.setflags(write=False)
            object.__setattr__(self, "source_indices", src)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def __len__(self) -> int:
        return self.n

    def take(self, indices: Sequence[int]) -> "PointCloud":
        """Sub-cloud at ``indices``; ``source_indices`` is composed through this cloud's."""
        idx = np.asarray(indices, dtype=np.int64)
        src = idx if self.source_indices is None else self.source_indices[idx]
        return PointCloud(self.points[idx], self.label, src)

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return PointCloud(points, self.label, self.source_indices)

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        if self.label != other.label or not np.array_equal(self.points, other.points):
            return False
        if (self.source_indices is None) != (other.source_indices is None):
            return False
        return self.source_indices is None or np.array_equal(
            self.source_indices, other.source_indices
        )


# ---------------------------------------------------------------------------
# XYZ text format
# ---------------------------------------------------------------------------


def load_xyz(path: PathLike) -> PointCloud:
    """Parse a whitespace-separated ``x y z [label]`` file.

    Blank lines and lines starting with ``#`` are skipped. The label is set only
    when every data line carries the fourth column, and all such labels agree.
    """
    rows = []
    labels = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) not in (3, 4):
                raise PointCloudError(
                    f"{path}: line {lineno}: expected 3 or 4 fields, got {len(fields)}"
                )
            try:
                xyz = [float(v) for v in fields[:3]]
            except ValueError:
                raise PointCloudError(f"{path}: line {lineno}: non-numeric coordinate") from None
            if not all(math.isfinite(v) for v in xyz):
                raise PointCloudError(f"{path}: line {lineno}: non-finite coordinate")
            rows.append(xyz)
            if len(fields) == 4:
                try:
                    lab = float(fields[3])
                except ValueError:
                    raise PointCloudError(f"{path}: line {lineno}: non-numeric label") from None
                if lab != int(lab):
                    raise PointCloudError(f"{path}: line {lineno}: label must be an integer")
                labels.append((lineno, int(lab)))
    if not rows:
        raise PointCloudError(f"{path}: no points found")
    label = None
    if len(labels) == len(rows):
        label = labels[0][1]
        for lineno, lab in labels:
            if lab != label:
                raise PointCloudError(
                    f"{path}: line {lineno}: label {lab} disagrees with cloud label {label}"
                )
    return PointCloud(np.array(rows, dtype=np.float64), label)


def save_xyz(pc: PointCloud, path: PathLike) -> None:
    """Write ``pc`` with 17 significant digits, so a reload is bit-exact."""
    lines = []
    for x, y, z in pc.points:
        line = f"{x:.17g} {y:.17g} {z:.17g}"
        if pc.label is not None:
            line += f" {pc.label:d}"
        lines.append(line)
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def random_subsample(pc: PointCloud, m: int, seed: int) -> PointCloud:
    """Pick ``m`` distinct points uniformly without replacement."""
    if not 1 <= m <= pc.n:
        raise PointCloudError(f"subsample size m={m} must satisfy 1 <= m <= n={pc.n}")
    idx = make_rng(seed).choice(pc.n, size=m, replace=False)
    return pc.take(idx)


def voxel_downsample(pc: PointCloud, voxel_len: float) -> PointCloud:
    """Replace the points in each occupied grid cell by their centroid.

    The grid is anchored at the origin; output order follows the sorted integer
    voxel keys.
    """
    if not voxel_len > 0:
        raise PointCloudError(f"voxel_len must be positive, got {voxel_len}")
    keys = np.floor(pc.points / voxel_len).astype(np.int64)
    _, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    count = np.bincount(inverse)
    sums = np.zeros((count.size, 3))
    np.add.at(sums, inverse, pc.points)
    return PointCloud(sums / count[:, None], pc.label)


# ---------------------------------------------------------------------------
# Nearest neighbour
# ---------------------------------------------------------------------------


def _sq_dists(points: np.ndarray, query: np.ndarray) -> np.ndarray:
    diff = points - query
    return np.einsum("ij,ij->i", diff, diff)


class SpatialIndex:
    """Exact nearest-neighbour index with a lowest-index tie rule.

    A kd-tree narrows the search; whenever the two best candidates are within a
    relative ``1e-9`` of each other the query falls back to scanning every point
    inside that radius, so answers coincide with an exhaustive scan.
    """

    def __init__(self, points: Union[PointCloud, np.ndarray]):
        pts = points.points if isinstance(points, PointCloud) else np.asarray(points, float)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise PointCloudError("spatial index needs a nonempty (n, 3) array")
        self._points = pts
        self._tree = cKDTree(pts)

    @property
    def size(self) -> int:
        return self._points.shape[0]

    def query(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Nearest index and Euclidean distance for each row of ``queries``."""
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        k = min(2, self.size)
        dist, idx = self._tree.query(q, k=k)
        if k == 1:
            return idx.astype(np.int64), dist
        best = idx[:, 0].astype(np.int64)
        slack = dist[:, 0] * _TIE_RTOL + _TIE_ATOL
        ambiguous = np.nonzero(dist[:, 1] - dist[:, 0] <= 2 * slack)[0]
        for row in ambiguous:
            radius = dist[row, 0] + 2 * slack[row] + 1e-12 * (1.0 + dist[row, 0])
            cand = np.array(sorted(self._tree.query_ball_point(q[row], radius)), dtype=np.int64)
            d2 = _sq_dists(self._points[cand], q[row])
            best[row] = cand[np.argmin(d2)]
        return best, np.sqrt(_sq_dists(self._points[best], q))


def nearest_index(index: SpatialIndex, query) -> int:
    idx, _ = index.query(np.asarray(query, dtype=np.float64).reshape(1, 3))
    return int(idx[0])


# ---------------------------------------------------------------------------
# Synthetic shapes
# ---------------------------------------------------------------------------


def _unit_sphere(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _box_surface(rng: np.random.Generator, n: int) -> np.ndarray:
    # Cube [-1, 1]^3; all six faces have equal area.
    face = rng.integers(0, 6, size=n)
    pts = rng.uniform(-1.0, 1.0, size=(n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, -1.0, 1.0)
    pts[np.arange(n), axis] = sign
    return pts


def _cylinder_surface(rng: np.random.Generator, n: int) -> np.ndarray:
    # Radius 1, z in [-1, 1]; lateral area 4*pi, each cap pi.
    part = rng.choice(3, size=n, p=[2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0])
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    z = rng.uniform(-1.0, 1.0, size=n)
    r = np.sqrt(rng.uniform(0.0, 1.0, size=n))
    lateral = part == 0
    r = np.where(lateral, 1.0, r)
    z = np.where(lateral, z, np.where(part == 1, 1.0, -1.0))
    return np.column_stack([r * np.cos(theta), r * np.sin(theta), z])


def synth_shape(kind: str, n: int, seed: int) -> PointCloud:
    """Sample ``n`` points on a unit-scale primitive centred at the origin.

    ``plane`` is the square [-1, 1]^2 at z = 0, ``sphere`` has radius 1, ``box``
    is the surface of the cube [-1, 1]^3 and ``cylinder`` has radius 1, height 2
    and closed caps. The label is the kind's position in ``SHAPE_KINDS``.
    """
    if kind not in SHAPE_KINDS:
        raise PointCloudError(f"unknown shape kind {kind!r}; expected one of {SHAPE_KINDS}")
    if n < 8:
        raise PointCloudError(f"synthetic shapes need n >= 8, got {n}")
    rng = make_rng(seed)
    if kind == "plane":
        pts = np.column_stack([rng.uniform(-1.0, 1.0, size=(n, 2)), np.zeros(n)])
    elif kind == "sphere":
        pts = _unit_sphere(rng, n)
    elif kind == "box":
        pts = _box_surface(rng, n)
    else:
        pts = _cylinder_surface(rng, n)
    return PointCloud(pts, SHAPE_KINDS.index(kind))


def synth_corpus(
    kinds: Sequence[str], per_class: int, n_points: int, seed: int
) -> list[PointCloud]:
    """Class-interleaved list of ``per_class`` shapes for every kind."""
    corpus = []
    for i in range(per_class):
        for kind in kinds:
            corpus.append(
                synth_shape(kind, n_points, derive_seed(seed, SHAPE_KINDS.index(kind), i))
            )
    return corpus
