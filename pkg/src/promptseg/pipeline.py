"""Two-stage inference: preprocessing to the model's square input,
automatic segmentation from detector boxes, and stateful interactive
refinement sessions.

A session owns one image, its cached embedding (computed exactly once), and
a set of mask records whose prompt histories fully determine their masks:
replaying a history through the model reproduces the current mask bitwise.
"""

from __future__ import annotations

import json
import math
import subprocess
import tempfile
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone

import cv2
import numpy as np
import torch

from .masks import BoxPrompt, PointPrompt, connected_components

AUTOMATIC, USER = "automatic", "user"


class MaskNotFoundError(KeyError):
    """Referenced mask id does not exist in the session."""


class DetectorError(RuntimeError):
    """The external box detector failed or returned malformed output."""


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class PreprocessRecord:
    """Invertible description of the resize+pad applied to one image."""

    orig_h: int
    orig_w: int
    target: int
    scale: float
    scaled_h: int
    scaled_w: int
    pad_bottom: int
    pad_right: int


def preprocess(image: np.ndarray, target: int = 1024):
    """Rescale so the longer side equals ``target`` (keeping aspect ratio),
    then zero-pad bottom/right to a ``target`` x ``target`` square.

    Returns (padded image, PreprocessRecord). Resizing is bilinear; the
    shorter side rounds half-up.
    """
    h, w = image.shape[:2]
    if h == 0 or w == 0:
        raise ValueError(f"empty image with shape {image.shape}")
    scale = target / max(h, w)
    scaled_h = _round_half_up(h * scale)
    scaled_w = _round_half_up(w * scale)
    resized = cv2.resize(
        image.astype(np.float32), (scaled_w, scaled_h), interpolation=cv2.INTER_LINEAR
    )
    pad_bottom = target - scaled_h
    pad_right = target - scaled_w
    pad_width = [(0, pad_bottom), (0, pad_right)]
    if resized.ndim == 3:
        pad_width.append((0, 0))
    padded = np.pad(resized, pad_width)
    record = PreprocessRecord(
        orig_h=h, orig_w=w, target=target, scale=scale,
        scaled_h=scaled_h, scaled_w=scaled_w,
        pad_bottom=pad_bottom, pad_right=pad_right,
    )
    return padded, record


def map_point_to_model(p: PointPrompt, rec: PreprocessRecord) -> PointPrompt:
    r = min(_round_half_up(p.row * rec.scale), rec.scaled_h - 1)
    c = min(_round_half_up(p.col * rec.scale), rec.scaled_w - 1)
    return PointPrompt(row=max(r, 0), col=max(c, 0), positive=p.positive)


def map_point_to_original(p: PointPrompt, rec: PreprocessRecord) -> PointPrompt:
    r = min(_round_half_up(p.row / rec.scale), rec.orig_h - 1)
    c = min(_round_half_up(p.col / rec.scale), rec.orig_w - 1)
    return PointPrompt(row=max(r, 0), col=max(c, 0), positive=p.positive)


def map_box_to_model(b: BoxPrompt, rec: PreprocessRecord) -> BoxPrompt:
    tl = map_point_to_model(PointPrompt(b.row_min, b.col_min), rec)
    br = map_point_to_model(PointPrompt(b.row_max, b.col_max), rec)
    return BoxPrompt(tl.row, tl.col, br.row, br.col)


def postprocess_mask(logits, rec: PreprocessRecord, threshold: float = 0.5) -> np.ndarray:
    """Crop the padding, resize logits back to the original resolution, and
    binarize at ``threshold`` (a probability; 0.5 means logit 0)."""
    if isinstance(logits, torch.Tensor):
        logits = logits.detach().cpu().numpy()
    if logits.shape != (rec.target, rec.target):
        raise ValueError(
            f"logits shape {logits.shape} does not match record target {rec.target}"
        )
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold {threshold} must be a probability in (0, 1)")
    content = np.ascontiguousarray(logits[: rec.scaled_h, : rec.scaled_w], dtype=np.float32)
    restored = cv2.resize(content, (rec.orig_w, rec.orig_h), interpolation=cv2.INTER_LINEAR)
    logit_threshold = math.log(threshold / (1.0 - threshold))
    return restored > logit_threshold


@dataclass(frozen=True)
class DetectorBox:
    box: BoxPrompt
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detector score {self.score} outside [0, 1]")


def parse_detector_json(data, image_shape) -> list[DetectorBox]:
    """Validate the detector wire format: a JSON list of
    ``{row_min, col_min, row_max, col_max, score}`` in image coordinates."""
    h, w = image_shape[:2]
    if not isinstance(data, list):
        raise DetectorError(f"detector output must be a list, got {type(data).__name__}")
    boxes = []
    for i, item in enumerate(data):
        try:
            box = BoxPrompt(
                row_min=int(item["row_min"]),
                col_min=int(item["col_min"]),
                row_max=int(item["row_max"]),
                col_max=int(item["col_max"]),
            )
            score = float(item["score"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DetectorError(f"malformed detector box {i}: {exc}") from exc
        if box.row_min < 0 or box.col_min < 0 or box.row_max >= h or box.col_max >= w:
            raise DetectorError(f"detector box {i} {box} outside {h}x{w} image")
        boxes.append(DetectorBox(box=box, score=score))
    return boxes


class OracleDetector:
    """Emits the tight (optionally padded) boxes of known ground-truth
    masks. Test/benchmark double for an external cell detector."""

    def __init__(self, masks, margin: int = 0, score: float = 1.0):
        from .masks import box_from_mask

        self._boxes = [
            DetectorBox(box=box_from_mask(m, margin), score=score) for m in masks if m.any()
        ]

    def detect(self, image: np.ndarray) -> list[DetectorBox]:
        return list(self._boxes)


class BlobDetector:
    """Dependency-free baseline: Otsu threshold + connected components.

    Finds dark (or bright) blobs against the background and returns their
    bounding boxes; the score is the component's fill fraction of its box.
    """

    def __init__(self, polarity: str = "dark", min_area: int = 24):
        if polarity not in ("dark", "bright"):
            raise ValueError(f"polarity must be 'dark' or 'bright', got {polarity!r}")
        self.polarity = polarity
        self.min_area = min_area

    def detect(self, image: np.ndarray) -> list[DetectorBox]:
        gray = image.mean(axis=2) if image.ndim == 3 else image
        gray8 = np.clip(gray * 255.0, 0, 255).astype(np.uint8)
        otsu, _ = cv2.threshold(gray8, 0, 255, cv2.THRESH_BINARY | cv2.THRESH_OTSU)
        fg = gray8 < otsu if self.polarity == "dark" else gray8 > otsu
        boxes = []
        for comp in connected_components(fg, connectivity=8):
            area = int(np.count_nonzero(comp))
            if area < self.min_area:
                continue
            from .masks import box_from_mask

            box = box_from_mask(comp)
            box_area = (box.row_max - box.row_min + 1) * (box.col_max - box.col_min + 1)
            boxes.append(DetectorBox(box=box, score=min(1.0, area / box_area)))
        return boxes


class SubprocessDetector:
    """Adapter for an external detector binary.

    Writes the image to a temporary PNG, invokes ``cmd <path>``, and parses
    the JSON box list from stdout.
    """

    def __init__(self, cmd: list[str], timeout: float = 60.0):
        self.cmd = list(cmd)
        self.timeout = timeout

    def detect(self, image: np.ndarray) -> list[DetectorBox]:
        from .dataio import save_image

        with tempfile.NamedTemporaryFile(suffix=".png") as tmp:
            save_image(image, tmp.name)
            try:
                proc = subprocess.run(
                    self.cmd + [tmp.name],
                    capture_output=True,
                    timeout=self.timeout,
                    check=True,
                )
            except subprocess.SubprocessError as exc:
                raise DetectorError(f"detector command failed: {exc}") from exc
        try:
            data = json.loads(proc.stdout)
        except json.JSONDecodeError as exc:
            raise DetectorError(f"detector emitted invalid JSON: {exc}") from exc
        return parse_detector_json(data, image.shape)


class HttpDetector:
    """Adapter for a detector behind an HTTP endpoint accepting a PNG body
    and answering with the JSON box list."""

    def __init__(self, url: str, timeout: float = 60.0):
        self.url = url
        self.timeout = timeout

    def detect(self, image: np.ndarray) -> list[DetectorBox]:
        import io

        import requests
        from PIL import Image

        buf = io.BytesIO()
        arr = (np.clip(image, 0, 1) * 255 + 0.5).astype(np.uint8)
        Image.fromarray(arr).save(buf, format="PNG")
        try:
            resp = requests.post(
                self.url,
                data=buf.getvalue(),
                headers={"Content-Type": "image/png"},
                timeout=self.timeout,
            )
            resp.raise_for_status()
            data = resp.json()
        except requests.RequestException as exc:
            raise DetectorError(f"detector request failed: {exc}") from exc
        return parse_detector_json(data, image.shape)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class MaskRecord:
    """One instance mask plus the prompt history that produced it."""

    mask_id: int
    mask: np.ndarray  # original resolution
    logits: np.ndarray  # model-resolution logits cache
    history: list = field(default_factory=list)  # prompts in original coords
    source: str = USER
    score: float | None = None
    created_at: str = field(default_factory=_now)
    updated_at: str = field(default_factory=_now)
    _undo: list = field(default_factory=list, repr=False)


class Session:
    """Live annotation state for one image.

    The embedding is computed once at construction and reused for every
    decode. Sessions are single-writer: concurrent mutation must be
    serialized by the caller; distinct sessions are independent.
    """

    def __init__(self, image: np.ndarray, model, session_id: str | None = None,
                 image_id: str = ""):
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"session image must be (H, W, 3), got {image.shape}")
        self.session_id = session_id or uuid.uuid4().hex
        self.image_id = image_id
        self.image = image
        self.model = model
        self.model_input, self.record = preprocess(image, model.input_size)
        with torch.no_grad():
            self.embedding = model.encode_image(self.model_input)
        self.masks: dict[int, MaskRecord] = {}
        self._next_id = 0
        self.created_at = _now()

    # -- decoding ---------------------------------------------------------

    def _validate_prompt(self, prompt) -> None:
        h, w = self.record.orig_h, self.record.orig_w
        if isinstance(prompt, PointPrompt):
            ok = 0 <= prompt.row < h and 0 <= prompt.col < w
        elif isinstance(prompt, BoxPrompt):
            ok = 0 <= prompt.row_min and prompt.row_max < h and 0 <= prompt.col_min and prompt.col_max < w
        else:
            raise TypeError(f"not a prompt: {prompt!r}")
        if not ok:
            raise ValueError(f"prompt {prompt} outside {h}x{w} image")

    def decode_history(self, history) -> tuple[np.ndarray, np.ndarray]:
        """Decode a full prompt history into (mask, logits). Deterministic:
        replaying any history reproduces its mask bitwise."""
        points = [map_point_to_model(p, self.record) for p in history
                  if isinstance(p, PointPrompt)]
        boxes = [map_box_to_model(b, self.record) for b in history
                 if isinstance(b, BoxPrompt)]
        with torch.no_grad():
            logits = self.model.predict_logits(self.embedding, points=points, boxes=boxes)
        if isinstance(logits, torch.Tensor):
            logits = logits.detach().cpu().numpy()
        logits = logits.astype(np.float32)
        return postprocess_mask(logits, self.record), logits

    def _get(self, mask_id: int) -> MaskRecord:
        if mask_id not in self.masks:
            raise MaskNotFoundError(f"no mask with id {mask_id}")
        return self.masks[mask_id]

    def _new_id(self) -> int:
        mask_id = self._next_id
        self._next_id += 1
        return mask_id

    # -- operations -------------------------------------------------------

    def auto_segment(self, detector, confidence_threshold: float = 0.5) -> list[MaskRecord]:
        """Decode one mask per detector box above the confidence threshold.

        Replaces any previous automatic masks; empty decodes are discarded.
        If the detector fails the session is left unchanged.
        """
        boxes = detector.detect(self.image)  # may raise; session untouched
        for mask_id in [k for k, r in self.masks.items() if r.source == AUTOMATIC]:
            del self.masks[mask_id]
        records = []
        for det in boxes:
            if det.score < confidence_threshold:
                continue
            mask, logits = self.decode_history([det.box])
            if not mask.any():
                continue
            record = MaskRecord(
                mask_id=self._new_id(), mask=mask, logits=logits,
                history=[det.box], source=AUTOMATIC, score=det.score,
            )
            self.masks[record.mask_id] = record
            records.append(record)
        return records

    def add_mask(self, prompt) -> MaskRecord:
        """Decode a new user mask from a single prompt."""
        self._validate_prompt(prompt)
        mask, logits = self.decode_history([prompt])
        record = MaskRecord(
            mask_id=self._new_id(), mask=mask, logits=logits,
            history=[prompt], source=USER,
        )
        self.masks[record.mask_id] = record
        return record

    def refine_mask(self, mask_id: int, prompt) -> MaskRecord:
        """Append a prompt to the mask's history and re-decode from the full
        history. The previous mask is retained for undo."""
        record = self._get(mask_id)
        self._validate_prompt(prompt)
        record._undo.append((record.mask, record.logits))
        record.history.append(prompt)
        record.mask, record.logits = self.decode_history(record.history)
        record.updated_at = _now()
        return record

    def undo_last_prompt(self, mask_id: int) -> MaskRecord:
        """Drop the most recent refinement. The creating prompt cannot be
        undone (remove the mask instead)."""
        record = self._get(mask_id)
        if len(record.history) <= 1 or not record._undo:
            raise ValueError(f"mask {mask_id} has no refinement to undo")
        record.history.pop()
        record.mask, record.logits = record._undo.pop()
        record.updated_at = _now()
        return record

    def remove_mask(self, mask_id: int) -> None:
        if mask_id not in self.masks:
            raise MaskNotFoundError(f"no mask with id {mask_id}")
        del self.masks[mask_id]


def create_session(image: np.ndarray, model, image_id: str = "") -> Session:
    return Session(image, model, image_id=image_id)
