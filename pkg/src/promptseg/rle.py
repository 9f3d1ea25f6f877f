"""COCO-style run-length codec for binary masks.

Runs are counted in column-major (Fortran) order and alternate
background/foreground, always starting with background, so an all-foreground
mask encodes as ``[0, h*w]``. This is the wire format used for annotations
on disk and for masks in API responses.
"""

from __future__ import annotations

import numpy as np

from .masks import as_mask


class RleFormatError(ValueError):
    """Encoded object is not a valid run-length mask."""


def encode_rle(mask: np.ndarray) -> dict:
    """Encode a binary mask as ``{"size": [h, w], "counts": [...]}``."""
    mask = as_mask(mask)
    h, w = mask.shape
    flat = mask.ravel(order="F")
    # boundaries between runs of equal value
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts.insert(0, 0)
    return {"size": [int(h), int(w)], "counts": [int(c) for c in counts]}


def decode_rle(obj: dict) -> np.ndarray:
    """Decode ``{"size": [h, w], "counts": [...]}`` back to a boolean mask."""
    try:
        h, w = (int(v) for v in obj["size"])
        counts = [int(c) for c in obj["counts"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise RleFormatError(f"malformed RLE object: {exc}") from exc
    if h < 1 or w < 1:
        raise RleFormatError(f"invalid size {obj.get('size')}")
    if any(c < 0 for c in counts):
        raise RleFormatError("negative run length")
    total = sum(counts)
    if total != h * w:
        raise RleFormatError(f"run lengths sum to {total}, expected {h * w}")
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    value = False
    for count in counts:
        if value:
            flat[pos : pos + count] = True
        pos += count
        value = not value
    return flat.reshape((h, w), order="F")
