"""Segmentation overlap scores, centerline overlap, and image quality.

Overlap scores come from the standard confusion counts. Edge conventions:
an empty ground truth with an empty prediction scores dsc = iou =
sensitivity = 1 (nothing to find, nothing found), an empty ground truth with
a non-empty prediction scores sensitivity 0, and specificity with no
negatives defaults to 1.

clDice follows the topology-aware formulation: with S(x) a 3D thinning
skeleton, topology precision is |S(pred) & gt| / |S(pred)|, topology
sensitivity is |S(gt) & pred| / |S(gt)|, and clDice is their harmonic mean.
"""

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage
from skimage.morphology import skeletonize as _skimage_skeletonize

from .volume import Volume, VolumeKind


@dataclass
class SegmentationReport:
    """Confusion counts plus derived overlap scores; cldice is optional."""

    tp: int
    fp: int
    fn: int
    tn: int
    dsc: float
    iou: float
    sensitivity: float
    specificity: float
    cldice: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "SegmentationReport":
        return cls(**json.loads(text))


@dataclass
class ImageQualityReport:
    """PSNR in dB (math.inf for identical inputs) and mean SSIM."""

    psnr: float
    ssim: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "ImageQualityReport":
        return cls(**json.loads(text))


def _as_bool(volume: Volume, name: str) -> np.ndarray:
    if volume.kind is not VolumeKind.MASK:
        raise ValueError(f"{name} must be a MASK volume")
    return volume.astype_bool()


def segmentation_metrics(pred: Volume, gt: Volume) -> SegmentationReport:
    """Confusion counts and DSC / IoU / sensitivity / specificity."""
    p = _as_bool(pred, "pred")
    g = _as_bool(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(np.count_nonzero(~p & ~g))

    if tp + fp + fn == 0:
        dsc = iou = 1.0
    else:
        dsc = 2.0 * tp / (2.0 * tp + fp + fn)
        iou = tp / (tp + fp + fn)
    sen = 1.0 if tp + fn == 0 and fp == 0 else (tp / (tp + fn) if tp + fn else 0.0)
    spe = tn / (tn + fp) if tn + fp else 1.0
    return SegmentationReport(tp, fp, fn, tn, dsc, iou, sen, spe)


def skeletonize(mask: Volume) -> Volume:
    """Topology-preserving 3D thinning to a 1-voxel-wide centerline.

    Deletes only simple points, so the skeleton is a subset of the input and
    has the same number of 26-connected components. A 1-voxel-thick line is
    returned unchanged.
    """
    m = _as_bool(mask, "mask")
    if not m.any():
        return Volume(np.zeros_like(mask.data), mask.spacing, VolumeKind.MASK)
    skel = _skimage_skeletonize(m)
    return Volume(skel.astype(np.float32), mask.spacing, VolumeKind.MASK)


def cl_dice(pred: Volume, gt: Volume) -> float:
    """Centerline Dice: harmonic mean of topology precision and sensitivity.

    Empty inputs follow the confusion-count conventions: both masks empty
    gives 1.0, exactly one empty gives 0.0. Thinning can erase a small but
    nonempty blob entirely; in that case the mask itself stands in as its
    own centerline, so identical masks still score 1.0 and disjoint ones 0.0.
    """
    p = _as_bool(pred, "pred")
    g = _as_bool(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    if not p.any() and not g.any():
        return 1.0
    if not p.any() or not g.any():
        return 0.0
    sp = skeletonize(pred).astype_bool()
    sg = skeletonize(gt).astype_bool()
    if not sp.any():
        sp = p
    if not sg.any():
        sg = g
    tprec = np.count_nonzero(sp & g) / np.count_nonzero(sp)
    tsens = np.count_nonzero(sg & p) / np.count_nonzero(sg)
    if tprec + tsens == 0.0:
        return 0.0
    return 2.0 * tprec * tsens / (tprec + tsens)


def psnr(a: np.ndarray, b: np.ndarray, data_range: float | None = None) -> float:
    """Peak signal-to-noise ratio of a against reference b, in dB.

    data_range defaults to the value range of the reference and must be
    positive. Identical inputs return math.inf.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if data_range is None:
        data_range = float(b.max() - b.min())
    if data_range <= 0:
        raise ValueError(f"data_range must be positive, got {data_range}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range * data_range / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return w / w.sum()


def _local_mean(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    # Separable windowed mean; edges are cropped afterwards so the padding
    # mode never reaches the reported values.
    tmp = ndimage.correlate1d(img, w, axis=0, mode="constant")
    return ndimage.correlate1d(tmp, w, axis=1, mode="constant")


def ssim(
    a: np.ndarray,
    b: np.ndarray,
    data_range: float | None = None,
    window: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Mean SSIM with a Gaussian window, evaluated on fully valid windows.

    2D inputs are scored directly; 3D inputs are treated as a stack of 2D
    images along the first axis and the per-image scores are averaged. Both
    images must be at least window wide in each scored dimension.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        if data_range is None:
            data_range = float(b.max() - b.min())
        return float(np.mean([
            ssim(a[i], b[i], data_range, window, sigma, k1, k2) for i in range(a.shape[0])
        ]))
    if a.ndim != 2:
        raise ValueError(f"ssim expects 2D images or 3D stacks, got ndim {a.ndim}")
    if min(a.shape) < window:
        raise ValueError(f"images must be at least {window} pixels per axis, got {a.shape}")
    if data_range is None:
        data_range = float(b.max() - b.min())
    if data_range <= 0:
        raise ValueError(f"data_range must be positive, got {data_range}")

    w = _gaussian_window(window, sigma)
    half = window // 2
    crop = (slice(half, a.shape[0] - half), slice(half, a.shape[1] - half))
    mu_a = _local_mean(a, w)[crop]
    mu_b = _local_mean(b, w)[crop]
    e_aa = _local_mean(a * a, w)[crop]
    e_bb = _local_mean(b * b, w)[crop]
    e_ab = _local_mean(a * b, w)[crop]
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def image_quality(a: np.ndarray, b: np.ndarray, data_range: float | None = None) -> ImageQualityReport:
    """PSNR and SSIM of a against reference b in one report."""
    return ImageQualityReport(psnr=psnr(a, b, data_range), ssim=ssim(a, b, data_range))
