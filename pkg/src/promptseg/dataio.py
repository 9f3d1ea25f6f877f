"""Dataset ingestion and export: instance label maps, RLE annotation files,
manifests with deterministic splits, and annotation-session export.

The canonical on-disk annotation is JSON with column-major RLE masks
(schema 1). Integer label-map images (PNG/TIFF, up to 16-bit) are accepted
on ingest. Manifests are line-delimited JSON.
"""

from __future__ import annotations

import glob
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np
from PIL import Image

from .masks import BoxPrompt, PointPrompt
from .rle import RleFormatError, decode_rle, encode_rle

logger = logging.getLogger(__name__)

ANNOTATION_SCHEMA_VERSION = 1

SPLITS = ("train", "val", "test")


class AnnotationFormatError(ValueError):
    """Annotation file cannot be parsed as its declared kind."""


@dataclass
class Sample:
    """One training/eval item: an RGB float image in [0, 1] plus its
    nonempty instance masks."""

    image: np.ndarray
    masks: list[np.ndarray]
    image_id: str = ""


def prompt_to_json(p) -> dict:
    if isinstance(p, PointPrompt):
        return {"type": "point", "row": p.row, "col": p.col, "positive": p.positive}
    if isinstance(p, BoxPrompt):
        return {
            "type": "box",
            "row_min": p.row_min,
            "col_min": p.col_min,
            "row_max": p.row_max,
            "col_max": p.col_max,
        }
    raise TypeError(f"not a prompt: {p!r}")


def prompt_from_json(d: dict):
    kind = d.get("type")
    if kind == "point":
        return PointPrompt(row=int(d["row"]), col=int(d["col"]), positive=bool(d["positive"]))
    if kind == "box":
        return BoxPrompt(
            row_min=int(d["row_min"]),
            col_min=int(d["col_min"]),
            row_max=int(d["row_max"]),
            col_max=int(d["col_max"]),
        )
    raise AnnotationFormatError(f"unknown prompt type {kind!r}")


def load_image(path) -> np.ndarray:
    """Read PNG/TIFF/JPEG into float32 RGB in [0, 1]."""
    with Image.open(path) as img:
        rgb = img.convert("RGB")
        return np.asarray(rgb, dtype=np.float32) / 255.0


def save_image(image: np.ndarray, path) -> None:
    arr = np.clip(image, 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)


def masks_from_label_map(label_map: np.ndarray) -> list[np.ndarray]:
    """One boolean mask per positive instance id, ids ascending."""
    if label_map.ndim != 2:
        raise AnnotationFormatError(f"label map must be 2-D, got shape {label_map.shape}")
    ids = np.unique(label_map)
    return [label_map == k for k in ids if k > 0]


def load_annotations(path, kind: str) -> list[np.ndarray]:
    """Load one file of instance annotations as a list of binary masks.

    ``kind`` is "labelmap" (integer-valued image, 0 = background) or
    "rle-json" (schema-1 JSON as written by :func:`export_session` or
    :func:`save_annotations`). Empty instances are dropped with a warning.
    """
    if kind == "labelmap":
        try:
            with Image.open(path) as img:
                label_map = np.asarray(img)
        except Exception as exc:
            raise AnnotationFormatError(f"cannot read label map {path}: {exc}") from exc
        if label_map.ndim == 3:  # RGB-encoded maps are not instance maps
            raise AnnotationFormatError(f"label map {path} has {label_map.shape[2]} channels")
        masks = masks_from_label_map(label_map.astype(np.int64))
        if not masks:
            logger.warning("label map %s contains no instances", path)
        return masks
    if kind == "rle-json":
        with open(path, "rb") as fh:
            raw = fh.read()
        try:
            doc = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise AnnotationFormatError(
                f"invalid JSON in {path} at byte offset {exc.pos}: {exc.msg}"
            ) from exc
        if doc.get("schema") != ANNOTATION_SCHEMA_VERSION:
            raise AnnotationFormatError(
                f"{path}: unsupported schema {doc.get('schema')!r}, expected "
                f"{ANNOTATION_SCHEMA_VERSION}"
            )
        masks = []
        for i, entry in enumerate(doc.get("masks", [])):
            try:
                m = decode_rle(entry["rle"])
            except (KeyError, RleFormatError) as exc:
                raise AnnotationFormatError(f"{path}: mask {i}: {exc}") from exc
            if not m.any():
                logger.warning("%s: mask %d is empty, dropped", path, i)
                continue
            masks.append(m)
        return masks
    raise ValueError(f"unknown annotation kind {kind!r}")


def save_annotations(masks, path, image_id: str = "", extra_per_mask=None) -> dict:
    """Write masks as a schema-1 RLE JSON file and return the document."""
    doc = {
        "schema": ANNOTATION_SCHEMA_VERSION,
        "image": {"id": image_id},
        "masks": [],
    }
    for i, m in enumerate(masks):
        entry = {"id": i, "rle": encode_rle(m)}
        if extra_per_mask:
            entry.update(extra_per_mask[i])
        doc["masks"].append(entry)
    with open(path, "w") as fh:
        json.dump(doc, fh)
    return doc


def export_session(session, path=None, image_ref: str = "") -> dict:
    """Serialize an annotation session: per-mask RLE, provenance, prompt
    history, and timestamps. The file loads back via
    ``load_annotations(path, "rle-json")``."""
    h, w = session.image.shape[:2]
    doc = {
        "schema": ANNOTATION_SCHEMA_VERSION,
        "image": {"id": image_ref or getattr(session, "image_id", ""), "height": h, "width": w},
        "exported_at": datetime.now(timezone.utc).isoformat(),
        "masks": [],
    }
    for record in session.masks.values():
        doc["masks"].append(
            {
                "id": record.mask_id,
                "source": record.source,
                "score": record.score,
                "rle": encode_rle(record.mask),
                "prompts": [prompt_to_json(p) for p in record.history],
                "created_at": record.created_at,
                "updated_at": record.updated_at,
            }
        )
    if path is not None:
        with open(path, "w") as fh:
            json.dump(doc, fh)
    return doc


@dataclass
class ManifestEntry:
    image: str
    annotation: str
    kind: str
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split {self.split!r} not in {SPLITS}")


@dataclass
class DatasetManifest:
    dataset: str
    entries: list[ManifestEntry] = field(default_factory=list)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(json.dumps({"manifest_version": 1, "dataset": self.dataset}) + "\n")
            for e in self.entries:
                fh.write(
                    json.dumps(
                        {
                            "image": e.image,
                            "annotation": e.annotation,
                            "kind": e.kind,
                            "split": e.split,
                        }
                    )
                    + "\n"
                )

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        with open(path) as fh:
            lines = [line for line in fh if line.strip()]
        if not lines:
            raise AnnotationFormatError(f"empty manifest {path}")
        header = json.loads(lines[0])
        if header.get("manifest_version") != 1:
            raise AnnotationFormatError(f"unsupported manifest version in {path}")
        entries = [ManifestEntry(**json.loads(line)) for line in lines[1:]]
        return cls(dataset=header.get("dataset", ""), entries=entries)


@dataclass
class ManifestRules:
    """How to find images and derive their annotation paths.

    ``annotation_replacements`` are substring substitutions applied to each
    image path (relative to the root) to locate its annotation.
    """

    image_glob: str = "images/*.png"
    annotation_replacements: tuple[tuple[str, str], ...] = (
        ("images/", "annotations/"),
        (".png", ".json"),
    )
    kind: str = "rle-json"
    val_fraction: float = 0.1
    test_fraction: float = 0.0
    seed: int = 0


def _split_hash(seed: int, rel_path: str) -> str:
    return hashlib.sha256(f"{seed}:{rel_path}".encode()).hexdigest()


def make_manifest(root, rules: ManifestRules, dataset_name: str = ""):
    """Scan ``root`` for images and build a deterministically split manifest.

    Images are ordered lexicographically; split assignment ranks them by a
    seeded hash of their relative path so the same fractions land on the
    same files on any machine. Returns (manifest, rejects) where rejects
    lists images whose annotation file is missing.
    """
    root = os.path.abspath(root)
    images = sorted(glob.glob(os.path.join(root, rules.image_glob)))
    if not images:
        raise FileNotFoundError(f"no images matched {rules.image_glob!r} under {root}")
    candidates, rejects = [], []
    for img_path in images:
        rel = os.path.relpath(img_path, root)
        ann_rel = rel
        for old, new in rules.annotation_replacements:
            ann_rel = ann_rel.replace(old, new)
        ann_path = os.path.join(root, ann_rel)
        if not os.path.exists(ann_path):
            rejects.append(rel)
            continue
        candidates.append((rel, ann_rel))
    ranked = sorted(candidates, key=lambda c: _split_hash(rules.seed, c[0]))
    n = len(ranked)
    n_test = int(round(rules.test_fraction * n))
    n_val = int(round(rules.val_fraction * n))
    split_of = {}
    for i, (rel, _) in enumerate(ranked):
        if i < n_test:
            split_of[rel] = "test"
        elif i < n_test + n_val:
            split_of[rel] = "val"
        else:
            split_of[rel] = "train"
    entries = [
        ManifestEntry(image=rel, annotation=ann_rel, kind=rules.kind, split=split_of[rel])
        for rel, ann_rel in candidates
    ]
    name = dataset_name or os.path.basename(root.rstrip("/"))
    return DatasetManifest(dataset=name, entries=entries), rejects


class ManifestDataset:
    """Sequence of :class:`Sample` backed by a manifest split; files load
    lazily per access."""

    def __init__(self, manifest: DatasetManifest, root, split: str = "train"):
        self.root = os.path.abspath(root)
        self.entries = manifest.split(split)
        self.dataset = manifest.dataset

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i: int) -> Sample:
        e = self.entries[i]
        image = load_image(os.path.join(self.root, e.image))
        masks = load_annotations(os.path.join(self.root, e.annotation), e.kind)
        return Sample(image=image, masks=masks, image_id=e.image)
