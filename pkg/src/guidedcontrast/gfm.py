"""Structural correspondence between two augmented views.

Both views are mapped back to the original frame with their applied records;
each view-2 point is then paired with its nearest view-1 point, and view-1
features are gathered along that map so they line up with view 2.
"""

from __future__ import annotations

import numpy as np

from .augmentation import AppliedRecord, invert_apply
from .pointcloud import PointCloud, SpatialIndex


class MappingError(ValueError):
    pass


def structural_map_with_distances(
    view1_inverted: PointCloud, view2_inverted: PointCloud
) -> tuple[np.ndarray, np.ndarray]:
    index = SpatialIndex(view1_inverted)
    return index.query(view2_inverted.points)


def structural_map(view1_inverted: PointCloud, view2_inverted: PointCloud) -> np.ndarray:
    """For every view-2 point, the index of the closest view-1 point (lowest index on ties)."""
    return structural_map_with_distances(view1_inverted, view2_inverted)[0]


def gather_features(feats1: np.ndarray, mapping: np.ndarray) -> np.ndarray:
    feats1 = np.asarray(feats1)
    mapping = np.asarray(mapping, dtype=np.int64)
    if mapping.size and (mapping.min() < 0 or mapping.max() >= feats1.shape[0]):
        raise MappingError(
            f"map entries must lie in [0, {feats1.shape[0]}), got range "
            f"[{mapping.min()}, {mapping.max()}]"
        )
    return feats1[mapping]


def scatter_gradient(d_gathered: np.ndarray, mapping: np.ndarray, n_rows: int) -> np.ndarray:
    """Adjoint of :func:`gather_features`: sums rows that share a source."""
    out = np.zeros((n_rows, d_gathered.shape[1]))
    np.add.at(out, mapping, d_gathered)
    return out


def map_views(
    view1: PointCloud,
    record1: AppliedRecord,
    view2: PointCloud,
    record2: AppliedRecord,
    invert_jitter: bool = True,
) -> np.ndarray:
    """Structural map between two augmented views of the same cloud."""
    return structural_map(
        invert_apply(record1, view1, invert_jitter),
        invert_apply(record2, view2, invert_jitter),
    )
