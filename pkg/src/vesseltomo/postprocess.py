"""Turning optimized volumes into clean binary vessel masks.

Thresholding keeps voxels at or above the requested percentile of the value
distribution (linear interpolation between order statistics, the inclusive
convention: for values 1..100 and p=95 the threshold is 95.05, selecting
96..100). Components are labeled deterministically in first-encounter order
of the flat x-fastest scan, so identical inputs always get identical labels.
"""

import csv
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import Volume, VolumeKind

# Default cleanup keeps components of at least 50 voxels on a 256^3 grid and
# scales that cutoff with the voxel count of the actual grid.
_REF_MIN_SIZE = 50
_REF_VOXELS = 256 ** 3

_CONNECTIVITY_TO_RANK = {6: 1, 18: 2, 26: 3}


@dataclass(frozen=True)
class SegmentationConfig:
    """Threshold percentile, neighborhood connectivity, cleanup policy.

    Exactly one cleanup policy applies: keep_largest keeps the n biggest
    components when set, otherwise components below min_component_size are
    dropped (None scales the 50-voxel reference cutoff to the grid size).
    """

    percentile: float = 95.0
    connectivity: int = 26
    min_component_size: int | None = None
    keep_largest: int | None = None

    def __post_init__(self) -> None:
        if not (0.0 < self.percentile < 100.0):
            raise ValueError(f"percentile must be in (0, 100), got {self.percentile}")
        if self.connectivity not in _CONNECTIVITY_TO_RANK:
            raise ValueError(f"connectivity must be 6, 18 or 26, got {self.connectivity}")
        if self.min_component_size is not None and self.min_component_size < 1:
            raise ValueError("min_component_size must be >= 1")
        if self.keep_largest is not None and self.keep_largest < 1:
            raise ValueError("keep_largest must be >= 1")
        if self.min_component_size is not None and self.keep_largest is not None:
            raise ValueError("set either min_component_size or keep_largest, not both")


def scaled_min_size(dims: tuple[int, int, int]) -> int:
    n = int(np.prod([int(d) for d in dims]))
    return max(1, round(_REF_MIN_SIZE * n / _REF_VOXELS))


def percentile_threshold(volume: Volume, percentile: float = 95.0) -> Volume:
    """Binary mask of voxels >= the p-th percentile of the volume values."""
    if not (0.0 <= percentile <= 100.0):
        raise ValueError(f"percentile must be in [0, 100], got {percentile}")
    data = volume.data
    if not np.all(np.isfinite(data)):
        raise ValueError("percentile threshold requires finite voxel values")
    thr = np.percentile(data.astype(np.float64), percentile)
    mask = (data >= thr).astype(np.float32)
    return Volume(mask, volume.spacing, VolumeKind.MASK)


def connected_components(mask: Volume, connectivity: int = 26) -> tuple[np.ndarray, np.ndarray]:
    """Label foreground components of a mask volume.

    Returns (labels, sizes): labels is an int32 array shaped like the mask
    payload with 0 for background, and sizes[i] is the voxel count of label
    i+1. Labels are assigned in order of each component's first voxel in the
    flat scan, independent of the backend's internal numbering.
    """
    if mask.kind is not VolumeKind.MASK:
        raise ValueError("connected_components requires a MASK volume")
    rank = _CONNECTIVITY_TO_RANK.get(connectivity)
    if rank is None:
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    structure = ndimage.generate_binary_structure(3, rank)
    raw, n = ndimage.label(mask.astype_bool(), structure=structure)
    raw = raw.astype(np.int32)
    if n == 0:
        return raw, np.zeros(0, dtype=np.int64)
    # Renumber by first-encounter position to pin the ordering contract.
    flat = raw.ravel()
    first = np.full(n + 1, flat.size, dtype=np.int64)
    np.minimum.at(first, flat, np.arange(flat.size, dtype=np.int64))
    order = np.argsort(first[1:], kind="stable")
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[1 + order] = np.arange(1, n + 1, dtype=np.int32)
    labels = remap[raw]
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:].astype(np.int64)
    return labels, sizes


def remove_small_components(mask: Volume, config: SegmentationConfig = SegmentationConfig()) -> Volume:
    """Drop noise components per the cleanup policy of the config."""
    labels, sizes = connected_components(mask, config.connectivity)
    if sizes.size == 0:
        return mask
    if config.keep_largest is not None:
        n_keep = min(config.keep_largest, sizes.size)
        # Stable order so equal-sized components resolve by label (scan) order.
        keep = np.sort(np.argsort(-sizes, kind="stable")[:n_keep]) + 1
        keep_mask = np.zeros(sizes.size + 1, dtype=bool)
        keep_mask[keep] = True
    else:
        cutoff = config.min_component_size
        if cutoff is None:
            cutoff = scaled_min_size(mask.dims)
        keep_mask = np.concatenate([[False], sizes >= cutoff])
    out = keep_mask[labels].astype(np.float32)
    return Volume(out, mask.spacing, VolumeKind.MASK)


def segment(volume: Volume, config: SegmentationConfig = SegmentationConfig()) -> Volume:
    """percentile_threshold followed by component cleanup."""
    return remove_small_components(
        percentile_threshold(volume, config.percentile), config
    )


def export_component_table(labels: np.ndarray, sizes: np.ndarray, path: str) -> None:
    """CSV of label, voxel count, and centroid (x, y, z) per component."""
    nz, ny, nx = labels.shape
    zz, yy, xx = np.nonzero(labels)
    ids = labels[zz, yy, xx]
    n = sizes.size
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "size", "centroid_x", "centroid_y", "centroid_z"])
        if n == 0:
            return
        cx = np.bincount(ids, weights=xx, minlength=n + 1)[1:]
        cy = np.bincount(ids, weights=yy, minlength=n + 1)[1:]
        cz = np.bincount(ids, weights=zz, minlength=n + 1)[1:]
        for i in range(n):
            s = float(sizes[i])
            w.writerow([i + 1, int(sizes[i]), cx[i] / s, cy[i] / s, cz[i] / s])
