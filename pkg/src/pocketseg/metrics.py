"""Segmentation metrics: Dice overlap, 95th-percentile Hausdorff boundary
distance in physical units, per-case evaluation, and cohort summaries."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .volume import LabelVolume


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|P∩G| / (|P|+|G|); both empty -> 1.0, exactly one empty -> 0.0."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    p = int(pred.sum())
    g = int(gt.sum())
    if p == 0 and g == 0:
        return 1.0
    inter = int(np.logical_and(pred, gt).sum())
    return 2.0 * inter / (p + g)


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Indices (n, 3) of foreground voxels with a background 6-neighbor.

    The array edge counts as background, so foreground touching the edge is
    boundary.
    """
    mask = np.asarray(mask).astype(bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = np.ones_like(mask)
    for axis in range(3):
        lo = tuple(slice(1, -1) if a != axis else slice(0, -2) for a in range(3))
        hi = tuple(slice(1, -1) if a != axis else slice(2, None) for a in range(3))
        interior &= padded[lo] & padded[hi]
    return np.argwhere(mask & ~interior)


def _directed_d95(src_pts: np.ndarray, dst_pts: np.ndarray) -> float:
    tree = cKDTree(dst_pts)
    dists, _ = tree.query(src_pts, k=1)
    return float(np.percentile(dists, 95))


def haus95(pred: np.ndarray, gt: np.ndarray, spacing) -> float | None:
    """Symmetric 95th-percentile Hausdorff distance in mm.

    Boundary voxels (6-neighborhood rule) of each mask are mapped to
    physical coordinates via the spacing; d95 of the nearest-neighbor
    distances is taken per direction (linear-interpolated percentile) and
    the max of the two directions returned. Undefined (None) when either
    mask is empty.
    """
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    if not pred.any() or not gt.any():
        return None
    spacing = np.asarray(spacing, dtype=np.float64)
    p_bnd = boundary_voxels(pred) * spacing
    g_bnd = boundary_voxels(gt) * spacing
    return max(_directed_d95(p_bnd, g_bnd), _directed_d95(g_bnd, p_bnd))


@dataclass
class CaseMetrics:
    case_id: str
    dsc_organ: float
    dsc_tumor: float | None
    haus95_organ: float | None
    haus95_tumor: float | None


def evaluate_case(pred: LabelVolume, gt: LabelVolume, case_id: str = "") -> CaseMetrics:
    """Per-case DSC and Haus95 for organ (label >= 1, inclusive of tumor)
    and tumor (label == 2)."""
    if (
        pred.dims != gt.dims
        or pred.geometry.orientation != gt.geometry.orientation
        or not np.allclose(pred.geometry.spacing, gt.geometry.spacing, rtol=0, atol=1e-5)
    ):
        raise ValueError(
            "prediction/ground-truth geometry mismatch:\n"
            f"  pred: dims={pred.dims} {pred.geometry}\n"
            f"  gt:   dims={gt.dims} {gt.geometry}"
        )
    spacing = gt.geometry.spacing
    pred_organ = pred.data >= 1
    gt_organ = gt.data >= 1
    pred_tumor = pred.data == 2
    gt_tumor = gt.data == 2
    return CaseMetrics(
        case_id=case_id,
        dsc_organ=dice(pred_organ, gt_organ),
        dsc_tumor=dice(pred_tumor, gt_tumor),
        haus95_organ=haus95(pred_organ, gt_organ, spacing),
        haus95_tumor=haus95(pred_tumor, gt_tumor, spacing),
    )


@dataclass
class SummaryStats:
    n: int
    mean: float
    std: float
    median: float
    q1: float
    q3: float
    iqr: float
    whisker_low: float
    whisker_high: float
    outliers: list = field(default_factory=list)


def summarize(values) -> SummaryStats:
    """Cohort statistics: mean, sample std, linear-interpolated quartiles,
    and Tukey outliers beyond 1.5 IQR whiskers."""
    values = np.asarray(list(values), dtype=np.float64)
    if values.size == 0:
        raise ValueError("cannot summarize an empty list")
    q1, median, q3 = np.percentile(values, [25, 50, 75])
    iqr = q3 - q1
    lo = q1 - 1.5 * iqr
    hi = q3 + 1.5 * iqr
    inliers = values[(values >= lo) & (values <= hi)]
    outliers = values[(values < lo) | (values > hi)]
    return SummaryStats(
        n=int(values.size),
        mean=float(values.mean()),
        std=float(values.std(ddof=1)) if values.size > 1 else 0.0,
        median=float(median),
        q1=float(q1),
        q3=float(q3),
        iqr=float(iqr),
        whisker_low=float(inliers.min()),
        whisker_high=float(inliers.max()),
        outliers=sorted(float(v) for v in outliers),
    )
