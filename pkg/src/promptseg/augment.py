"""Training-time augmentations applied consistently to image, masks, and
prompt coordinates.

Three families: random resized crops, hue/saturation/value jitter, and the
dihedral group of the square (rotations and reflections). Geometric
transforms move image, every instance mask, and every point/box through the
same coordinate map; color jitter leaves geometry untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

from .masks import BoxPrompt, PointPrompt

# identity, three clockwise rotations, horizontal/vertical mirrors, and the
# two diagonal reflections
D4_ELEMENTS = ("e", "r90", "r180", "r270", "fh", "fv", "fd", "fa")

_ARRAY_OPS = {
    "e": lambda a: a,
    "r90": lambda a: np.rot90(a, -1),
    "r180": lambda a: np.rot90(a, 2),
    "r270": lambda a: np.rot90(a, 1),
    "fh": np.fliplr,
    "fv": np.flipud,
    "fd": lambda a: np.swapaxes(a, 0, 1),
    "fa": lambda a: np.swapaxes(np.rot90(a, 2), 0, 1),
}

_POINT_OPS = {
    "e": lambda r, c, n: (r, c),
    "r90": lambda r, c, n: (c, n - 1 - r),
    "r180": lambda r, c, n: (n - 1 - r, n - 1 - c),
    "r270": lambda r, c, n: (n - 1 - c, r),
    "fh": lambda r, c, n: (r, n - 1 - c),
    "fv": lambda r, c, n: (n - 1 - r, c),
    "fd": lambda r, c, n: (c, r),
    "fa": lambda r, c, n: (n - 1 - c, n - 1 - r),
}


def _build_composition_table() -> dict[tuple[str, str], str]:
    # identify g∘h by its action on two probe points of an asymmetric frame
    n = 8
    probes = [(0, 1), (2, 5)]

    def signature(fn):
        return tuple(fn(r, c) for r, c in probes)

    by_signature = {
        signature(lambda r, c, op=op: _POINT_OPS[op](r, c, n)): op for op in D4_ELEMENTS
    }
    table = {}
    for g in D4_ELEMENTS:
        for h in D4_ELEMENTS:
            sig = signature(lambda r, c: _POINT_OPS[g](*_POINT_OPS[h](r, c, n), n))
            table[(g, h)] = by_signature[sig]
    return table


_COMPOSE = _build_composition_table()
_INVERSE = {g: next(h for h in D4_ELEMENTS if _COMPOSE[(g, h)] == "e") for g in D4_ELEMENTS}


def compose(g: str, h: str) -> str:
    """Group composition g∘h (h applied first)."""
    return _COMPOSE[(g, h)]


def inverse(g: str) -> str:
    return _INVERSE[g]


def random_element(rng: np.random.Generator) -> str:
    return D4_ELEMENTS[int(rng.integers(len(D4_ELEMENTS)))]


def transform_array(g: str, a: np.ndarray) -> np.ndarray:
    """Apply a square symmetry to a (N, N) or (N, N, C) array."""
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"square symmetry on non-square array {a.shape}")
    return np.ascontiguousarray(_ARRAY_OPS[g](a))


def transform_point(g: str, point: PointPrompt, n: int) -> PointPrompt:
    r, c = _POINT_OPS[g](point.row, point.col, n)
    return PointPrompt(row=int(r), col=int(c), positive=point.positive)


def transform_box(g: str, box: BoxPrompt, n: int) -> BoxPrompt:
    corners = [
        _POINT_OPS[g](r, c, n)
        for r in (box.row_min, box.row_max)
        for c in (box.col_min, box.col_max)
    ]
    rows = [p[0] for p in corners]
    cols = [p[1] for p in corners]
    return BoxPrompt(min(rows), min(cols), max(rows), max(cols))


def apply_d4(
    g: str,
    image: np.ndarray,
    masks: list[np.ndarray],
    points: list[PointPrompt] = (),
    boxes: list[BoxPrompt] = (),
):
    """Apply one square symmetry to an image, its masks, and any prompts.

    Returns (image, masks, points, boxes). The image must be square.
    """
    if g not in _ARRAY_OPS:
        raise ValueError(f"unknown symmetry {g!r}, expected one of {D4_ELEMENTS}")
    n = image.shape[0]
    image_t = transform_array(g, image)
    masks_t = [transform_array(g, m) for m in masks]
    points_t = [transform_point(g, p, n) for p in points]
    boxes_t = [transform_box(g, b, n) for b in boxes]
    return image_t, masks_t, points_t, boxes_t


@dataclass
class AugmentationConfig:
    crop_scale: tuple[float, float] = (0.5, 1.0)
    crop_aspect: tuple[float, float] = (0.9, 1.1)
    hue_limit: float = 20.0  # degrees
    saturation_limit: float = 0.3
    value_limit: float = 0.2
    crop_probability: float = 0.5
    color_probability: float = 0.5
    output_size: int = 128

    def __post_init__(self):
        if self.crop_scale[0] > self.crop_scale[1] or self.crop_scale[0] <= 0:
            raise ValueError(f"bad crop scale range {self.crop_scale}")
        if self.crop_aspect[0] > self.crop_aspect[1] or self.crop_aspect[0] <= 0:
            raise ValueError(f"bad crop aspect range {self.crop_aspect}")
        for p in (self.crop_probability, self.color_probability):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability {p} outside [0, 1]")


def resize_image(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize to (height, width)."""
    h, w = size
    return cv2.resize(image, (w, h), interpolation=cv2.INTER_LINEAR)


def resize_mask(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resize keeping the mask binary."""
    h, w = size
    out = cv2.resize(mask.astype(np.uint8), (w, h), interpolation=cv2.INTER_NEAREST)
    return out.astype(bool)


def random_resized_crop(
    image: np.ndarray,
    masks: list[np.ndarray],
    cfg: AugmentationConfig,
    rng: np.random.Generator,
):
    """Crop a random sub-rectangle and resize it to the configured size.

    The window's area fraction is drawn from ``crop_scale`` and its aspect
    ratio from ``crop_aspect``. Instances left empty by the crop are dropped.
    Returns (image, masks, kept_indices).
    """
    h, w = image.shape[:2]
    window = None
    for _ in range(10):
        area = rng.uniform(*cfg.crop_scale) * h * w
        aspect = np.exp(rng.uniform(np.log(cfg.crop_aspect[0]), np.log(cfg.crop_aspect[1])))
        cw = int(round(np.sqrt(area * aspect)))
        ch = int(round(np.sqrt(area / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(h - ch + 1))
            left = int(rng.integers(w - cw + 1))
            window = (top, left, ch, cw)
            break
    if window is None:
        window = (0, 0, h, w)
    top, left, ch, cw = window
    out_size = (cfg.output_size, cfg.output_size)
    image_out = resize_image(image[top : top + ch, left : left + cw], out_size)
    masks_out, kept = [], []
    for i, m in enumerate(masks):
        cropped = m[top : top + ch, left : left + cw]
        if not cropped.any():
            continue
        resized = resize_mask(cropped, out_size)
        if not resized.any():
            continue
        masks_out.append(resized)
        kept.append(i)
    return image_out, masks_out, kept


def apply_hsv_shift(image: np.ndarray, dh: float, ds: float, dv: float) -> np.ndarray:
    """Shift hue by ``dh`` degrees (cyclic) and add ``ds``/``dv`` to
    saturation/value, clipped to [0, 1]. Expects float RGB in [0, 1]."""
    hsv = cv2.cvtColor(image.astype(np.float32), cv2.COLOR_RGB2HSV)
    hsv[..., 0] = np.mod(hsv[..., 0] + dh, 360.0)
    hsv[..., 1] = np.clip(hsv[..., 1] + ds, 0.0, 1.0)
    hsv[..., 2] = np.clip(hsv[..., 2] + dv, 0.0, 1.0)
    return cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)


def hsv_jitter(
    image: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator
) -> np.ndarray:
    dh = rng.uniform(-cfg.hue_limit, cfg.hue_limit)
    ds = rng.uniform(-cfg.saturation_limit, cfg.saturation_limit)
    dv = rng.uniform(-cfg.value_limit, cfg.value_limit)
    return apply_hsv_shift(image, dh, ds, dv)


def apply_augmentations(
    image: np.ndarray,
    masks: list[np.ndarray],
    cfg: AugmentationConfig,
    rng: np.random.Generator,
):
    """Full training-time chain: crop, color jitter, square symmetry.

    Crop and color are applied with their configured probabilities; the
    symmetry element is drawn uniformly (identity included). Prompts are
    sampled downstream, after augmentation, so only image and masks move
    here. Returns (image, masks); masks may come back shorter when the crop
    empties instances.
    """
    if rng.random() < cfg.crop_probability:
        image, masks, _ = random_resized_crop(image, masks, cfg, rng)
    if rng.random() < cfg.color_probability:
        image = hsv_jitter(image, cfg, rng)
    g = random_element(rng)
    image, masks, _, _ = apply_d4(g, image, masks)
    return image, masks
