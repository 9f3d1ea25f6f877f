"""Synthetic elliptical-blob images for desk-scale experiments.

Each image carries a handful of non-overlapping dark elliptical instances on
a light textured background, sized so the full train/eval cycle runs on a
CPU in minutes.
"""

from __future__ import annotations

import cv2
import numpy as np

from .dataio import Sample


def make_blob_sample(
    rng: np.random.Generator,
    size: int = 128,
    min_instances: int = 3,
    max_instances: int = 8,
    image_id: str = "",
) -> Sample:
    """One image with ``min_instances``..``max_instances`` elliptical blobs."""
    base = 0.82 + 0.08 * rng.random()
    image = np.full((size, size, 3), base, dtype=np.float32)
    image += rng.normal(0.0, 0.015, size=image.shape).astype(np.float32)

    n = int(rng.integers(min_instances, max_instances + 1))
    masks: list[np.ndarray] = []
    occupied = np.zeros((size, size), dtype=bool)
    attempts = 0
    while len(masks) < n and attempts < 200:
        attempts += 1
        a = int(rng.integers(max(6, size // 16), max(10, size // 6)))
        b = int(rng.integers(max(5, size // 20), max(8, size // 8)))
        cy = int(rng.integers(a, size - a))
        cx = int(rng.integers(a, size - a))
        angle = float(rng.uniform(0, 180))
        canvas = np.zeros((size, size), dtype=np.uint8)
        cv2.ellipse(canvas, (cx, cy), (a, b), angle, 0, 360, 1, -1)
        mask = canvas.astype(bool)
        # keep instances separated so each blob is its own component
        dilated = cv2.dilate(canvas, np.ones((5, 5), np.uint8)).astype(bool)
        if (dilated & occupied).any():
            continue
        occupied |= mask
        masks.append(mask)
        color = np.array(
            [0.25 + 0.3 * rng.random(), 0.2 + 0.3 * rng.random(), 0.35 + 0.3 * rng.random()],
            dtype=np.float32,
        )
        image[mask] = color + rng.normal(0.0, 0.01, size=(int(mask.sum()), 3)).astype(np.float32)

    image = cv2.GaussianBlur(image, (3, 3), 0)
    return Sample(image=np.clip(image, 0.0, 1.0), masks=masks, image_id=image_id)


def make_blob_dataset(
    count: int,
    seed: int = 0,
    size: int = 128,
    min_instances: int = 3,
    max_instances: int = 8,
) -> list[Sample]:
    rng = np.random.default_rng(seed)
    return [
        make_blob_sample(rng, size, min_instances, max_instances, image_id=f"blob-{i:04d}")
        for i in range(count)
    ]
