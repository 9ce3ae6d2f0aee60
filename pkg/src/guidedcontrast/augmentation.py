"""Invertible geometric augmentations and the distance between augmentations.

An augmentation is applied in the fixed order crop, scale, rotate, translate,
jitter. ``apply`` returns an :class:`AppliedRecord` carrying the crop
survivors and the exact jitter noise, which is what makes the whole chain
(minus the crop) invertible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from ._rng import derive_seed, make_rng
from .pointcloud import PointCloud

TWO_PI = 2.0 * math.pi

# Slack for range checks on normalized parameters (float round-off only).
_RANGE_TOL = 1e-12


class AugmentationError(ValueError):
    pass


Vec3 = tuple[float, float, float]


def _vec3(v, name: str) -> Vec3:
    out = tuple(float(x) for x in v)
    if len(out) != 3 or not all(math.isfinite(x) for x in out):
        raise AugmentationError(f"{name} must be 3 finite numbers, got {v!r}")
    return out  # type: ignore[return-value]


@dataclass(frozen=True)
class Crop:
    anchor_seed: int
    fraction: float = 0.3

    def __post_init__(self):
        if not 0.0 < self.fraction < 1.0:
            raise AugmentationError(f"crop fraction must lie in (0, 1), got {self.fraction}")


@dataclass(frozen=True)
class Jitter:
    sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not self.sigma >= 0.0:
            raise AugmentationError(f"jitter sigma must be >= 0, got {self.sigma}")


@dataclass(frozen=True)
class Augmentation:
    """One draw from the augmentation space.

    ``rotation`` holds Euler angles (radians) about x, y and z; the matrix is
    ``Rz @ Ry @ Rx``.
    """

    crop: Optional[Crop] = None
    scale: Vec3 = (1.0, 1.0, 1.0)
    rotation: Vec3 = (0.0, 0.0, 0.0)
    translation: Vec3 = (0.0, 0.0, 0.0)
    jitter: Jitter = field(default_factory=lambda: Jitter(0.0, 0))

    def __post_init__(self):
        object.__setattr__(self, "scale", _vec3(self.scale, "scale"))
        object.__setattr__(self, "rotation", _vec3(self.rotation, "rotation"))
        object.__setattr__(self, "translation", _vec3(self.translation, "translation"))
        if any(s == 0.0 for s in self.scale):
            raise AugmentationError("scale factors must be nonzero")

    @classmethod
    def identity(cls) -> "Augmentation":
        return cls()

    def without_crop(self) -> "Augmentation":
        return replace(self, crop=None)

    def rotation_matrix(self) -> np.ndarray:
        return rotation_matrix(self.rotation)

    def to_dict(self) -> dict:
        return {
            "crop": None
            if self.crop is None
            else {"anchor_seed": self.crop.anchor_seed, "fraction": self.crop.fraction},
            "scale": list(self.scale),
            "rotation": list(self.rotation),
            "translation": list(self.translation),
            "jitter": {"sigma": self.jitter.sigma, "seed": self.jitter.seed},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Augmentation":
        try:
            crop = d.get("crop")
            jit = d.get("jitter") or {"sigma": 0.0, "seed": 0}
            return cls(
                crop=None if crop is None else Crop(int(crop["anchor_seed"]), float(crop.get("fraction", 0.3))),
                scale=d.get("scale", (1.0, 1.0, 1.0)),
                rotation=d.get("rotation", (0.0, 0.0, 0.0)),
                translation=d.get("translation", (0.0, 0.0, 0.0)),
                jitter=Jitter(float(jit.get("sigma", 0.0)), int(jit.get("seed", 0))),
            )
        except (KeyError, TypeError, AttributeError) as exc:
            raise AugmentationError(f"invalid augmentation record: {exc}") from None


@dataclass(frozen=True)
class AugRanges:
    """Sampling bounds and per-family enable flags.

    Defaults: scale [0.5, 1], rotation [0, 2*pi) per axis, translation
    [-1, 1] m, crop 30% of the points, jitter sigma 1 cm.
    """

    scale: tuple[float, float] = (0.5, 1.0)
    rotation: tuple[float, float] = (0.0, TWO_PI)
    translation: tuple[float, float] = (-1.0, 1.0)
    crop_fraction: float = 0.3
    jitter_sigma: float = 0.01
    enable_crop: bool = True
    enable_scale: bool = True
    enable_rotation: bool = True
    enable_translation: bool = True
    enable_jitter: bool = True

    def __post_init__(self):
        for name in ("scale", "rotation", "translation"):
            lo, hi = (float(x) for x in getattr(self, name))
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise AugmentationError(f"{name} range must satisfy lo <= hi, got {(lo, hi)}")
            object.__setattr__(self, name, (lo, hi))
        if self.rotation[0] < 0.0 or self.rotation[1] > TWO_PI:
            raise AugmentationError(f"rotation range must lie within [0, 2*pi], got {self.rotation}")
        if self.scale[0] <= 0.0:
            raise AugmentationError("scale range must be positive")
        if not 0.0 < self.crop_fraction < 1.0:
            raise AugmentationError(f"crop fraction must lie in (0, 1), got {self.crop_fraction}")
        if self.jitter_sigma < 0.0:
            raise AugmentationError("jitter sigma must be >= 0")

    def to_dict(self) -> dict:
        return {
            "scale": list(self.scale),
            "rotation": list(self.rotation),
            "translation": list(self.translation),
            "crop_fraction": self.crop_fraction,
            "jitter_sigma": self.jitter_sigma,
            "enable_crop": self.enable_crop,
            "enable_scale": self.enable_scale,
            "enable_rotation": self.enable_rotation,
            "enable_translation": self.enable_translation,
            "enable_jitter": self.enable_jitter,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AugRanges":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise AugmentationError(f"unknown augmentation range keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


@dataclass(frozen=True, eq=False)
class AppliedRecord:
    """Side data of one ``apply`` call.

    ``surviving_indices`` index the *input* cloud; ``jitter_noise`` has one row
    per output point.
    """

    augmentation: Augmentation
    surviving_indices: np.ndarray
    jitter_noise: np.ndarray

    def __post_init__(self):
        idx = np.array(self.surviving_indices, dtype=np.int64).reshape(-1)
        noise = np.array(self.jitter_noise, dtype=np.float64).reshape(-1, 3)
        if idx.shape[0] != noise.shape[0]:
            raise AugmentationError(
                f"record has {idx.shape[0]} survivors but {noise.shape[0]} noise rows"
            )
        idx.setflags(write=False)
        noise.setflags(write=False)
        object.__setattr__(self, "surviving_indices", idx)
        object.__setattr__(self, "jitter_noise", noise)

    def __len__(self) -> int:
        return self.surviving_indices.shape[0]

    def to_dict(self) -> dict:
        return {
            "augmentation": self.augmentation.to_dict(),
            "surviving_indices": self.surviving_indices.tolist(),
            "jitter_noise": self.jitter_noise.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AppliedRecord":
        try:
            return cls(
                Augmentation.from_dict(d["augmentation"]),
                d["surviving_indices"],
                d["jitter_noise"] if d["jitter_noise"] else np.zeros((0, 3)),
            )
        except (KeyError, TypeError) as exc:
            raise AugmentationError(f"invalid applied record: {exc}") from None


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------


def rotation_matrix(angles: Sequence[float]) -> np.ndarray:
    a, b, g = angles
    ca, sa = math.cos(a), math.sin(a)
    cb, sb = math.cos(b), math.sin(b)
    cg, sg = math.cos(g), math.sin(g)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]])
    ry = np.array([[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]])
    rz = np.array([[cg, -sg, 0.0], [sg, cg, 0.0], [0.0, 0.0, 1.0]])
    return rz @ ry @ rx


def sample_random(ranges: AugRanges, seed: int) -> Augmentation:
    """Draw every family uniformly within ``ranges``; disabled families are identity.

    All values are drawn regardless of the flags so that toggling one family
    never shifts the random stream of another.
    """
    u = make_rng(seed).random(9)
    (s_lo, s_hi), (r_lo, r_hi), (t_lo, t_hi) = ranges.scale, ranges.rotation, ranges.translation
    scale = [s_lo + (s_hi - s_lo) * x for x in u[0:3]]
    rot = [(r_lo + (r_hi - r_lo) * x) % TWO_PI for x in u[3:6]]
    trans = [t_lo + (t_hi - t_lo) * x for x in u[6:9]]
    crop = Crop(derive_seed(seed, 1), ranges.crop_fraction) if ranges.enable_crop else None
    sigma = ranges.jitter_sigma if ranges.enable_jitter else 0.0
    return Augmentation(
        crop=crop,
        scale=tuple(scale) if ranges.enable_scale else (1.0, 1.0, 1.0),
        rotation=tuple(rot) if ranges.enable_rotation else (0.0, 0.0, 0.0),
        translation=tuple(trans) if ranges.enable_translation else (0.0, 0.0, 0.0),
        jitter=Jitter(sigma, derive_seed(seed, 2) if sigma > 0.0 else 0),
    )


def crop(pc: PointCloud, anchor_seed: int, fraction: float) -> np.ndarray:
    """Remove the ``floor(fraction * n)`` points nearest a random anchor.

    The anchor itself is a candidate for removal. Distance ties are ranked by
    index. Returns the kept indices in ascending order.
    """
    if not 0.0 < fraction < 1.0:
        raise AugmentationError(f"crop fraction must lie in (0, 1), got {fraction}")
    n = pc.n
    # 1e-9 guard keeps e.g. 0.29 * 100 from flooring to 28.
    k = int(math.floor(fraction * n + 1e-9))
    if k >= n:
        raise AugmentationError(f"crop of {fraction} would remove all {n} points")
    if k == 0:
        return np.arange(n, dtype=np.int64)
    anchor = int(make_rng(anchor_seed).integers(n))
    diff = pc.points - pc.points[anchor]
    d2 = np.einsum("ij,ij->i", diff, diff)
    order = np.argsort(d2, kind="stable")
    return np.sort(order[k:])


def _forward_points(aug: Augmentation, points: np.ndarray, noise: np.ndarray) -> np.ndarray:
    out = points * np.asarray(aug.scale)
    out = out @ aug.rotation_matrix().T
    out = out + np.asarray(aug.translation)
    return out + noise


def apply(
    aug: Augmentation,
    pc: PointCloud,
    point_budget: Optional[int] = None,
    seed: int = 0,
) -> tuple[PointCloud, AppliedRecord]:
    """Apply ``aug`` in the order crop, scale, rotate, translate, jitter.

    If ``point_budget`` is smaller than the number of crop survivors, a final
    uniform subsample (driven by ``seed``) is folded into the record. The
    output cloud's ``source_indices`` point back into ``pc``'s ancestry.
    """
    survivors = (
        np.arange(pc.n, dtype=np.int64)
        if aug.crop is None
        else crop(pc, aug.crop.anchor_seed, aug.crop.fraction)
    )
    if aug.jitter.sigma > 0.0:
        noise = make_rng(aug.jitter.seed).normal(0.0, aug.jitter.sigma, size=(survivors.size, 3))
    else:
        noise = np.zeros((survivors.size, 3))
    if point_budget is not None:
        if point_budget < 1:
            raise AugmentationError(f"point budget must be >= 1, got {point_budget}")
        if point_budget < survivors.size:
            keep = make_rng(seed).choice(survivors.size, size=point_budget, replace=False)
            survivors, noise = survivors[keep], noise[keep]
    record = AppliedRecord(aug, survivors, noise)
    return replay(record, pc), record


def replay(record: AppliedRecord, pc: PointCloud) -> PointCloud:
    """Recompute the output of the ``apply`` call that produced ``record``."""
    if record.surviving_indices.size and record.surviving_indices.max() >= pc.n:
        raise AugmentationError("record indices exceed the input cloud size")
    base = pc.take(record.surviving_indices)
    return base.with_points(_forward_points(record.augmentation, base.points, record.jitter_noise))


def invert_apply(record: AppliedRecord, pc: PointCloud, invert_jitter: bool = True) -> PointCloud:
    """Undo jitter, translation, rotation and scale (crop cannot be undone).

    With ``invert_jitter=False`` the recorded noise is left in place, which
    models sensor noise that a real pipeline could not subtract.
    """
    if pc.n != len(record):
        raise AugmentationError(
            f"cloud has {pc.n} points but the record describes {len(record)}"
        )
    aug = record.augmentation
    pts = pc.points
    if invert_jitter:
        pts = pts - record.jitter_noise
    pts = pts - np.asarray(aug.translation)
    pts = pts @ aug.rotation_matrix()
    pts = pts / np.asarray(aug.scale)
    return pc.with_points(pts)


# ---------------------------------------------------------------------------
# Distances
# ---------------------------------------------------------------------------


def angular_distance(r1, r2) -> float:
    """Wrap-around distance between angle vectors already normalized to [0, 1].

    Per dimension this is ``0.5 - ||r1 - r2| - 0.5|``, evaluated in the
    equivalent form ``min(|d|, 1 - |d|)``, which avoids the cancellation of the
    literal expression and is exact whenever ``|d| <= 0.5``.
    """
    a = np.asarray(r1, dtype=np.float64)
    b = np.asarray(r2, dtype=np.float64)
    for v in (a, b):
        if np.any(v < 0.0) or np.any(v > 1.0):
            raise AugmentationError(f"normalized angles must lie in [0, 1], got {v}")
    d = np.abs(a - b)
    return float(np.sum(np.minimum(d, 1.0 - d)))


def _unit_interval(values: Sequence[float], lo: float, hi: float, name: str) -> list[float]:
    out = []
    for v in values:
        if v < lo - _RANGE_TOL or v > hi + _RANGE_TOL:
            raise AugmentationError(f"{name} {list(values)} outside range [{lo}, {hi}]")
        out.append(0.0 if hi == lo else min(max((v - lo) / (hi - lo), 0.0), 1.0))
    return out


def normalized_params(aug: Augmentation, ranges: AugRanges = AugRanges()) -> np.ndarray:
    """9-vector ``[rotation/2pi, translation, scale]`` mapped to [0, 1]."""
    if any(r < 0.0 or r > TWO_PI for r in aug.rotation):
        raise AugmentationError(f"rotation {aug.rotation} outside [0, 2*pi)")
    return np.array(
        [r / TWO_PI for r in aug.rotation]
        + _unit_interval(aug.translation, *ranges.translation, "translation")
        + _unit_interval(aug.scale, *ranges.scale, "scale")
    )


def pairwise_distances(
    a: np.ndarray, b: np.ndarray, weights: Sequence[float] = (1.0, 1.0, 1.0)
) -> np.ndarray:
    """Weighted augmentation distances between rows of ``a`` (k, 9) and ``b`` (m, 9)."""
    w_r, w_t, w_s = weights
    delta = np.abs(np.atleast_2d(a)[:, None, :] - np.atleast_2d(b)[None, :, :])
    d_rot = np.sum(np.minimum(delta[..., 0:3], 1.0 - delta[..., 0:3]), axis=-1)
    d_trans = np.sqrt(np.sum(delta[..., 3:6] ** 2, axis=-1))
    d_scale = np.sqrt(np.sum(delta[..., 6:9] ** 2, axis=-1))
    return w_r * d_rot + w_t * d_trans + w_s * d_scale


def distances_to_many(
    query: np.ndarray, bank: np.ndarray, weights: Sequence[float] = (1.0, 1.0, 1.0)
) -> np.ndarray:
    """Weighted augmentation distance from one normalized 9-vector to each row of ``bank``."""
    return pairwise_distances(np.asarray(query).reshape(1, 9), bank, weights)[0]


def aug_distance(
    a: Augmentation,
    b: Augmentation,
    weights: Sequence[float] = (1.0, 1.0, 1.0),
    ranges: AugRanges = AugRanges(),
) -> float:
    """Weighted distance over rotation (wrap-around), translation and scale.

    Crop and jitter are point-specific and do not contribute.
    """
    return float(distances_to_many(normalized_params(a, ranges), normalized_params(b, ranges)[None], weights)[0])
