"""Mask-to-box transforms with center-point dispatch.

A (soft) mask is projected onto its two axes; depending on whether the
foreground centroid itself lies on foreground, the box supervision mask is
either the element-wise min of the back-projected profiles (single compact
object) or the cross-band union minus a centered gap rectangle (multiple
separated objects). All projection/back-projection steps are differentiable
when given a Tensor; the gap rectangle is a constant geometric construction.
"""

import enum
from dataclasses import dataclass
from typing import NamedTuple, Union

import numpy as np

from . import tensor as T

MaskLike = Union[np.ndarray, T.Tensor]


class EmptyMaskError(ValueError):
    """Raised when an operation needs foreground pixels and there are none."""


class Center(enum.Enum):
    FOREGROUND = "foreground"
    BACKGROUND = "background"


@dataclass(frozen=True)
class CenterStatus:
    status: Center
    centroid: tuple  # (row, col), half-up rounded mean of thresholded pixels


@dataclass(frozen=True)
class BoxCoords:
    """Inclusive pixel-coordinate box."""

    row_min: int
    col_min: int
    row_max: int
    col_max: int

    def as_tuple(self):
        return (self.row_min, self.col_min, self.row_max, self.col_max)


class Projection(NamedTuple):
    width_profile: MaskLike  # per-column maxima, length W
    height_profile: MaskLike  # per-row maxima, length H


def _raw(mask):
    return mask.data if isinstance(mask, T.Tensor) else np.asarray(mask)


def project(mask: MaskLike) -> Projection:
    """Per-axis maxima of a 2-d mask; differentiable for Tensor input."""
    if isinstance(mask, T.Tensor):
        if mask.data.ndim != 2:
            raise T.ShapeError(f"project expects a 2-d mask, got shape {mask.data.shape}")
        return Projection(T.reduce_max(mask, axis=0), T.reduce_max(mask, axis=1))
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise T.ShapeError(f"project expects a 2-d mask, got shape {arr.shape}")
    return Projection(arr.max(axis=0), arr.max(axis=1))


def _outer(proj: Projection, combine_t, combine_np):
    pw, ph = proj
    if isinstance(pw, T.Tensor) or isinstance(ph, T.Tensor):
        pw = T.as_tensor(pw)
        ph = T.as_tensor(ph)
        h, w = ph.data.shape[0], pw.data.shape[0]
        rows = T.broadcast_to(T.reshape(ph, (h, 1)), (h, w))
        cols = T.broadcast_to(T.reshape(pw, (1, w)), (h, w))
        return combine_t(cols, rows)
    return combine_np(np.asarray(pw)[None, :], np.asarray(ph)[:, None])


def backproject_min(proj: Projection) -> MaskLike:
    """Element-wise min of the back-projected profiles.

    For a binary mask this is the outer product of occupied-row and
    occupied-column indicators: a union of axis-aligned rectangles.
    """
    return _outer(proj, T.minimum, np.minimum)


def backproject_max(proj: Projection) -> MaskLike:
    """Element-wise max of the back-projected profiles: the cross-band union
    of every occupied row band and occupied column band."""
    return _outer(proj, T.maximum, np.maximum)


def center_status(mask: MaskLike, threshold: float = 0.5) -> CenterStatus:
    """Locate the thresholded-foreground centroid and classify it.

    The centroid is the half-up-rounded mean position of pixels >= threshold;
    the status says whether the mask at that pixel is itself foreground.
    """
    arr = _raw(mask)
    fg = arr >= threshold
    rows, cols = np.nonzero(fg)
    if rows.size == 0:
        raise EmptyMaskError("no foreground: no pixel reaches the threshold")
    r = int(np.floor(rows.mean() + 0.5))
    c = int(np.floor(cols.mean() + 0.5))
    status = Center.FOREGROUND if fg[r, c] else Center.BACKGROUND
    return CenterStatus(status=status, centroid=(r, c))


def _min_run_gap(occupied: np.ndarray) -> int:
    """Smallest gap between consecutive runs of True entries; 0 for <= 1 run."""
    idx = np.flatnonzero(occupied)
    if idx.size < 2:
        return 0
    steps = np.diff(idx)
    gaps = steps[steps > 1] - 1
    return int(gaps.min()) if gaps.size else 0


def min_gap_box(mask: MaskLike, centroid, threshold: float = 0.5) -> np.ndarray:
    """Rectangle sized by the smallest projection run gaps, centered on the
    centroid and clipped to the grid. Empty when either gap is zero."""
    arr = _raw(mask)
    fg = arr >= threshold
    d_h = _min_run_gap(fg.any(axis=1))
    d_w = _min_run_gap(fg.any(axis=0))
    out = np.zeros(arr.shape, dtype=arr.dtype)
    if d_h == 0 or d_w == 0:
        return out
    r, c = centroid
    r0 = max(0, r - (d_h - 1) // 2)
    c0 = max(0, c - (d_w - 1) // 2)
    out[r0 : r0 + d_h, c0 : c0 + d_w] = 1.0
    return out


def mask_to_box(mask: MaskLike, threshold: float = 0.5):
    """Turn a (soft) mask into its box supervision mask.

    Foreground-centered masks take the min-backprojection path; background-
    centered ones (multiple separated objects) take the cross-band union minus
    the centered gap rectangle, clamped to [0, 1]. Returns (box, CenterStatus).
    """
    status = center_status(mask, threshold)
    proj = project(mask)
    if status.status is Center.FOREGROUND:
        box = backproject_min(proj)
    else:
        band = backproject_max(proj)
        gap = min_gap_box(mask, status.centroid, threshold)
        if isinstance(band, T.Tensor):
            box = T.clamp(T.sub(band, T.Tensor(gap, dtype=band.data.dtype)), 0.0, 1.0)
        else:
            box = np.clip(band - gap, 0.0, 1.0)
    if isinstance(box, T.Tensor):
        box.meta["branch"] = status.status
    return box, status


def box_coords(box_mask: MaskLike, threshold: float = 0.5) -> BoxCoords:
    """Tight inclusive coordinate box over the thresholded support."""
    arr = _raw(box_mask)
    rows, cols = np.nonzero(arr >= threshold)
    if rows.size == 0:
        raise EmptyMaskError("no support: box mask has no pixel above the threshold")
    return BoxCoords(int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max()))


def rasterize_box(coords: BoxCoords, height: int, width: int, dtype=np.float32) -> np.ndarray:
    """Fill the inclusive coordinate box with ones on a zero grid."""
    if not (0 <= coords.row_min <= coords.row_max < height and 0 <= coords.col_min <= coords.col_max < width):
        raise ValueError(f"box {coords.as_tuple()} out of bounds for grid ({height}, {width})")
    out = np.zeros((height, width), dtype=dtype)
    out[coords.row_min : coords.row_max + 1, coords.col_min : coords.col_max + 1] = 1.0
    return out


def gt_box_mask(gt_mask: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Weak label: the rasterized tight bounding rectangle of a GT mask."""
    arr = np.asarray(gt_mask)
    coords = box_coords(arr, threshold)
    return rasterize_box(coords, arr.shape[0], arr.shape[1], dtype=arr.dtype if arr.dtype.kind == "f" else np.float32)
