"""Pixelwise segmentation metrics: overlap scores, rates, and HD95."""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .boxes import EmptyMaskError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


def confusion_counts(pred: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> ConfusionCounts:
    """Threshold both grids and count pixel agreement."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"confusion_counts: shapes differ, {pred.shape} vs {gt.shape}")
    p = pred >= threshold
    g = gt >= threshold
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & g)),
        fp=int(np.count_nonzero(p & ~g)),
        fn=int(np.count_nonzero(~p & g)),
        tn=int(np.count_nonzero(~p & ~g)),
    )


def _safe_div(num, den):
    # 0/0 means a vacuously perfect score
    return 1.0 if den == 0 else num / den


def dsc_miou(c: ConfusionCounts):
    """Dice, foreground IoU, and the fg/bg-mean IoU."""
    dsc = _safe_div(2.0 * c.tp, 2.0 * c.tp + c.fp + c.fn)
    iou_fg = _safe_div(float(c.tp), float(c.tp + c.fp + c.fn))
    iou_bg = _safe_div(float(c.tn), float(c.tn + c.fp + c.fn))
    return dsc, iou_fg, (iou_fg + iou_bg) / 2.0


def acc_sen_spe(c: ConfusionCounts):
    """Accuracy, sensitivity (recall), specificity."""
    acc = _safe_div(float(c.tp + c.tn), float(c.total))
    sen = _safe_div(float(c.tp), float(c.tp + c.fn))
    spe = _safe_div(float(c.tn), float(c.tn + c.fp))
    return acc, sen, spe


def _directed_nn_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    dists, _ = cKDTree(dst).query(src, k=1)
    return dists


def hd95(pred: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> float:
    """Symmetric 95th-percentile Hausdorff distance between foreground sets.

    Distances are Euclidean nearest-neighbor distances over the full
    thresholded point sets; each direction is reduced to its 95th percentile
    (linear interpolation) and the two directions are combined with max.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"hd95: shapes differ, {pred.shape} vs {gt.shape}")
    a = np.argwhere(pred >= threshold).astype(np.float64)
    b = np.argwhere(gt >= threshold).astype(np.float64)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise EmptyMaskError("undefined HD95: one of the masks is empty after thresholding")
    d_ab = np.percentile(_directed_nn_distances(a, b), 95, method="linear")
    d_ba = np.percentile(_directed_nn_distances(b, a), 95, method="linear")
    return float(max(d_ab, d_ba))
