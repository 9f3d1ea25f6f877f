"""Pure geometry and metric kernel over binary instance masks.

A binary mask is a 2-D boolean numpy array, ``mask[row, col]``, True on
foreground. All operations here are pure functions on immutable inputs and
safe to call from concurrent workers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


class MaskShapeError(ValueError):
    """Masks passed to a binary operation have different shapes."""


class EmptyMaskError(ValueError):
    """Operation requires at least one foreground pixel."""


@dataclass(frozen=True)
class PointPrompt:
    """A single click. ``positive`` clicks grow the mask, negative ones shrink it."""

    row: int
    col: int
    positive: bool = True


@dataclass(frozen=True)
class BoxPrompt:
    """Axis-aligned box prompt with inclusive pixel bounds."""

    row_min: int
    col_min: int
    row_max: int
    col_max: int

    def __post_init__(self):
        if self.row_min > self.row_max or self.col_min > self.col_max:
            raise ValueError(f"degenerate box {self}")


@dataclass(frozen=True)
class ErrorRegions:
    """Disagreement between a prediction and ground truth, split by sign.

    ``false_negative`` is gt & ~pred (underprediction), ``false_positive`` is
    pred & ~gt (overprediction). The two are pixel-disjoint and their union is
    pred XOR gt.
    """

    false_negative: np.ndarray
    false_positive: np.ndarray


def as_mask(a) -> np.ndarray:
    """Validate and return ``a`` as a 2-D boolean mask."""
    m = np.asarray(a)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise MaskShapeError(f"mask must be 2-D and nonempty, got shape {m.shape}")
    return m.astype(bool, copy=False)


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise MaskShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union. Two empty masks count as a perfect match (1.0)."""
    a, b = as_mask(a), as_mask(b)
    _check_same_shape(a, b)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def dice_coefficient(a: np.ndarray, b: np.ndarray) -> float:
    """Sørensen-Dice overlap, 2|a∧b| / (|a|+|b|); 1.0 when both masks are empty."""
    a, b = as_mask(a), as_mask(b)
    _check_same_shape(a, b)
    total = np.count_nonzero(a) + np.count_nonzero(b)
    if total == 0:
        return 1.0
    return 2.0 * np.count_nonzero(a & b) / total


_STRUCT_4 = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
_STRUCT_8 = np.ones((3, 3), dtype=bool)


def connected_components(m: np.ndarray, connectivity: int = 4) -> list[np.ndarray]:
    """Split a mask into its connected components.

    Returns one boolean mask per component, sorted by area descending; ties
    are broken by the smallest (row, col) of the component's first foreground
    pixel in row-major order.
    """
    m = as_mask(m)
    if connectivity == 4:
        structure = _STRUCT_4
    elif connectivity == 8:
        structure = _STRUCT_8
    else:
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    labels, n = ndimage.label(m, structure=structure)
    if n == 0:
        return []
    flat = labels.ravel()
    areas = np.bincount(flat, minlength=n + 1)
    # first row-major foreground index per label
    first = np.full(n + 1, flat.size, dtype=np.int64)
    fg = np.flatnonzero(flat)
    # reversed so the earliest index wins
    first[flat[fg[::-1]]] = fg[::-1]
    order = sorted(range(1, n + 1), key=lambda k: (-areas[k], first[k]))
    return [labels == k for k in order]


def error_regions(pred: np.ndarray, gt: np.ndarray) -> ErrorRegions:
    """Split the prediction/ground-truth disagreement into FN and FP masks."""
    pred, gt = as_mask(pred), as_mask(gt)
    _check_same_shape(pred, gt)
    return ErrorRegions(false_negative=gt & ~pred, false_positive=pred & ~gt)


def mask_center(m: np.ndarray) -> tuple[int, int]:
    """Interior point of ``m`` maximizing distance to the mask boundary.

    The image border counts as boundary (the mask is padded with background
    before the euclidean distance transform). Ties break on the smallest
    (row, col).
    """
    m = as_mask(m)
    if not m.any():
        raise EmptyMaskError("mask_center of an empty mask")
    padded = np.pad(m, 1)
    dist = ndimage.distance_transform_edt(padded)[1:-1, 1:-1]
    dist[~m] = -1.0
    best = np.argmax(dist)  # argmax returns the first (row-major) maximum
    row, col = np.unravel_index(best, m.shape)
    return int(row), int(col)


def largest_error_component(
    pred: np.ndarray, gt: np.ndarray, connectivity: int = 4
) -> tuple[np.ndarray, bool] | None:
    """Largest connected component among both error regions.

    FN and FP components compete jointly on area; an exact area tie prefers
    the false-negative side. Returns (component, is_false_negative), or None
    when prediction and ground truth agree everywhere.
    """
    regions = error_regions(pred, gt)
    candidates = []
    for side_rank, (region, is_fn) in enumerate(
        [(regions.false_negative, True), (regions.false_positive, False)]
    ):
        for comp in connected_components(region, connectivity):
            first = np.flatnonzero(comp.ravel())[0]
            candidates.append((-np.count_nonzero(comp), side_rank, first, comp, is_fn))
    if not candidates:
        return None
    _, _, _, comp, is_fn = min(candidates, key=lambda c: c[:3])
    return comp, is_fn


def sample_correction_click(
    pred: np.ndarray,
    gt: np.ndarray,
    rng: np.random.Generator | None = None,
    placement: str = "center",
    connectivity: int = 4,
) -> PointPrompt | None:
    """Next corrective click given a prediction and its ground truth.

    The click lands in the largest error component: positive when the
    component is underpredicted, negative when overpredicted. ``placement``
    is "center" (deterministic distance-transform center, the evaluation
    convention) or "random" (uniform pixel in the component, used during
    training; requires ``rng``). Returns None once pred == gt.
    """
    selected = largest_error_component(pred, gt, connectivity)
    if selected is None:
        return None
    comp, is_fn = selected
    if placement == "center":
        row, col = mask_center(comp)
    elif placement == "random":
        if rng is None:
            raise ValueError("placement='random' requires an rng")
        point = sample_point_in_mask(comp, rng)
        row, col = point.row, point.col
    else:
        raise ValueError(f"unknown placement {placement!r}")
    return PointPrompt(row=int(row), col=int(col), positive=is_fn)


def box_from_mask(m: np.ndarray, margin: int = 0) -> BoxPrompt:
    """Tight bounding box of the foreground, expanded by ``margin`` per side
    and clamped to the image bounds."""
    m = as_mask(m)
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    if rows.size == 0:
        raise EmptyMaskError("box_from_mask of an empty mask")
    h, w = m.shape
    return BoxPrompt(
        row_min=max(int(rows[0]) - margin, 0),
        col_min=max(int(cols[0]) - margin, 0),
        row_max=min(int(rows[-1]) + margin, h - 1),
        col_max=min(int(cols[-1]) + margin, w - 1),
    )


def sample_point_in_mask(m: np.ndarray, rng: np.random.Generator) -> PointPrompt:
    """Uniformly random foreground pixel, as a positive click."""
    m = as_mask(m)
    rows, cols = np.nonzero(m)
    if rows.size == 0:
        raise EmptyMaskError("sample_point_in_mask of an empty mask")
    k = int(rng.integers(rows.size))
    return PointPrompt(row=int(rows[k]), col=int(cols[k]), positive=True)
