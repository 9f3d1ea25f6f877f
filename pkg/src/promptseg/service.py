"""HTTP annotation service wrapping inference sessions for the UI and
scripted clients.

Masks travel as column-major RLE, never as raw pixel arrays. A single model
instance serves all sessions; inference runs through a bounded FIFO queue so
no session blocks another for more than one forward pass. Session state is
LRU-bounded in memory and spills to disk via the export format, so sessions
survive restarts when a spill directory is configured.
"""

from __future__ import annotations

import io
import json
import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeoutError
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse

from . import dataio
from .masks import BoxPrompt, PointPrompt
from .pipeline import (
    BlobDetector,
    DetectorError,
    HttpDetector,
    MaskNotFoundError,
    MaskRecord,
    Session,
    SubprocessDetector,
)
from .rle import encode_rle

logger = logging.getLogger(__name__)

BAD_REQUEST, NOT_FOUND, MODEL_ERROR, IO_ERROR = (
    "bad_request",
    "not_found",
    "model_error",
    "io_error",
)


class ApiError(Exception):
    def __init__(self, code: str, message: str, status: int):
        super().__init__(message)
        self.code = code
        self.message = message
        self.status = status


def bad_request(msg: str) -> ApiError:
    return ApiError(BAD_REQUEST, msg, 400)


def not_found(msg: str) -> ApiError:
    return ApiError(NOT_FOUND, msg, 404)


def model_error(msg: str) -> ApiError:
    return ApiError(MODEL_ERROR, msg, 503)


@dataclass
class ServiceSettings:
    """Service configuration; every field maps to a PROMPTSEG_* env var."""

    checkpoint: str = ""
    detector: str = "blob"  # blob | none | subprocess:<cmd> | http:<url>
    port: int = 8080
    queue_depth: int = 8
    request_timeout: float = 30.0
    session_capacity: int = 16
    spill_dir: str = ""
    max_upload_bytes: int = 32 * 1024 * 1024
    confidence_threshold: float = 0.5

    @classmethod
    def from_env(cls, env=os.environ) -> "ServiceSettings":
        s = cls()
        s.checkpoint = env.get("PROMPTSEG_CHECKPOINT", s.checkpoint)
        s.detector = env.get("PROMPTSEG_DETECTOR", s.detector)
        s.port = int(env.get("PROMPTSEG_PORT", s.port))
        s.queue_depth = int(env.get("PROMPTSEG_QUEUE_DEPTH", s.queue_depth))
        s.request_timeout = float(env.get("PROMPTSEG_TIMEOUT_S", s.request_timeout))
        s.session_capacity = int(env.get("PROMPTSEG_SESSION_CAPACITY", s.session_capacity))
        s.spill_dir = env.get("PROMPTSEG_SPILL_DIR", s.spill_dir)
        s.max_upload_bytes = int(env.get("PROMPTSEG_MAX_UPLOAD_BYTES", s.max_upload_bytes))
        s.confidence_threshold = float(
            env.get("PROMPTSEG_CONFIDENCE_THRESHOLD", s.confidence_threshold)
        )
        return s


def make_detector(spec: str):
    if spec == "blob":
        return BlobDetector()
    if spec == "none":
        return None
    if spec.startswith("subprocess:"):
        return SubprocessDetector(spec.split(":", 1)[1].split())
    if spec.startswith("http:") or spec.startswith("https:"):
        return HttpDetector(spec)
    raise ValueError(f"unknown detector spec {spec!r}")


class InferenceQueue:
    """Serializes model work through one worker with a bounded backlog."""

    def __init__(self, depth: int, timeout: float):
        self._executor = ThreadPoolExecutor(max_workers=1)
        self._slots = threading.BoundedSemaphore(depth)
        self._timeout = timeout

    def run(self, fn, *args, **kwargs):
        if not self._slots.acquire(blocking=False):
            raise model_error("inference queue full, retry later")
        try:
            future = self._executor.submit(fn, *args, **kwargs)
            try:
                return future.result(timeout=self._timeout)
            except FutureTimeoutError as exc:
                future.cancel()
                raise model_error(f"inference timed out after {self._timeout}s") from exc
        finally:
            self._slots.release()


class SessionStore:
    """LRU-bounded session cache with optional disk persistence.

    With a spill directory configured, every mutation writes through to disk
    (image PNG + annotation JSON in the export format), so evicted sessions
    reload transparently and all sessions survive a server restart; masks
    rebuild by history replay.
    """

    def __init__(self, model, capacity: int, spill_dir: str = ""):
        self.model = model
        self.capacity = capacity
        self.spill_dir = spill_dir
        self._sessions: dict[str, Session] = {}
        self._order: list[str] = []
        self._lock = threading.Lock()
        self._session_locks: dict[str, threading.Lock] = {}
        if spill_dir:
            os.makedirs(spill_dir, exist_ok=True)

    def _touch(self, session_id: str) -> None:
        if session_id in self._order:
            self._order.remove(session_id)
        self._order.append(session_id)

    def _spill_paths(self, session_id: str) -> tuple[str, str]:
        return (
            os.path.join(self.spill_dir, f"{session_id}.png"),
            os.path.join(self.spill_dir, f"{session_id}.json"),
        )

    def persist(self, session: Session) -> None:
        """Write-through snapshot; no-op without a spill directory."""
        if not self.spill_dir:
            return
        img_path, ann_path = self._spill_paths(session.session_id)
        if not os.path.exists(img_path):
            dataio.save_image(session.image, img_path)
        dataio.export_session(session, ann_path)

    def _evict_if_needed(self) -> None:
        while len(self._sessions) > self.capacity:
            victim_id = self._order.pop(0)
            session = self._sessions.pop(victim_id)
            if not self.spill_dir:
                logger.warning("dropping session %s (no spill dir)", victim_id)
                continue
            self.persist(session)
            logger.info("spilled session %s", victim_id)

    def _restore(self, session_id: str) -> Session | None:
        if not self.spill_dir:
            return None
        img_path, ann_path = self._spill_paths(session_id)
        if not (os.path.exists(img_path) and os.path.exists(ann_path)):
            return None
        image = dataio.load_image(img_path)
        with open(ann_path) as fh:
            doc = json.load(fh)
        session = Session(image, self.model, session_id=session_id,
                          image_id=doc.get("image", {}).get("id", ""))
        for entry in doc.get("masks", []):
            history = [dataio.prompt_from_json(p) for p in entry.get("prompts", [])]
            if not history:
                continue
            mask, logits = session.decode_history(history)
            record = MaskRecord(
                mask_id=int(entry["id"]), mask=mask, logits=logits,
                history=history, source=entry.get("source", "user"),
                score=entry.get("score"),
                created_at=entry.get("created_at", session.created_at),
                updated_at=entry.get("updated_at", session.created_at),
            )
            session.masks[record.mask_id] = record
            session._next_id = max(session._next_id, record.mask_id + 1)
        return session

    def add(self, session: Session) -> None:
        with self._lock:
            self._sessions[session.session_id] = session
            self._session_locks[session.session_id] = threading.Lock()
            self._touch(session.session_id)
            self._evict_if_needed()

    def get(self, session_id: str) -> tuple[Session, threading.Lock]:
        with self._lock:
            session = self._sessions.get(session_id)
            if session is None:
                session = self._restore(session_id)
                if session is None:
                    raise not_found(f"unknown session {session_id}")
                self._sessions[session_id] = session
            self._touch(session_id)
            self._evict_if_needed()
            lock = self._session_locks.setdefault(session_id, threading.Lock())
            return session, lock


def _record_json(record: MaskRecord) -> dict:
    return {
        "id": record.mask_id,
        "source": record.source,
        "score": record.score,
        "rle": encode_rle(record.mask),
        "history_length": len(record.history),
    }


def _parse_prompt(body: dict):
    try:
        return dataio.prompt_from_json(body)
    except (dataio.AnnotationFormatError, KeyError, TypeError, ValueError) as exc:
        raise bad_request(f"malformed prompt: {exc}") from exc


def create_app(model, settings: ServiceSettings | None = None, detector=None) -> FastAPI:
    """Build the annotation service around one model instance.

    ``detector`` overrides the settings-specified detector (tests inject
    oracles here).
    """
    settings = settings or ServiceSettings()
    if detector is None and settings.detector:
        detector = make_detector(settings.detector)
    store = SessionStore(model, settings.session_capacity, settings.spill_dir)
    queue = InferenceQueue(settings.queue_depth, settings.request_timeout)
    app = FastAPI(title="promptseg annotation service")

    @app.exception_handler(ApiError)
    async def api_error_handler(request: Request, exc: ApiError):
        return JSONResponse(
            status_code=exc.status,
            content={"error": {"code": exc.code, "message": exc.message}},
        )

    def decode_upload(data: bytes) -> np.ndarray:
        if not data:
            raise bad_request("empty upload")
        if len(data) > settings.max_upload_bytes:
            raise bad_request(f"upload exceeds {settings.max_upload_bytes} bytes")
        from PIL import Image, UnidentifiedImageError

        try:
            with Image.open(io.BytesIO(data)) as img:
                rgb = img.convert("RGB")
                return np.asarray(rgb, dtype=np.float32) / 255.0
        except UnidentifiedImageError as exc:
            raise bad_request(f"undecodable image: {exc}") from exc

    @app.post("/sessions", status_code=201)
    async def create_session_endpoint(request: Request):
        data = await request.body()
        image = decode_upload(data)
        session = queue.run(Session, image, model)
        store.add(session)
        store.persist(session)
        h, w = image.shape[:2]
        return {"session_id": session.session_id, "height": h, "width": w,
                "created_at": session.created_at}

    @app.post("/sessions/{session_id}/auto")
    def auto_endpoint(session_id: str):
        session, lock = store.get(session_id)
        if detector is None:
            raise model_error("no detector configured; retry with manual prompts")
        with lock:
            try:
                records = queue.run(
                    session.auto_segment, detector, settings.confidence_threshold
                )
            except DetectorError as exc:
                raise model_error(f"detector failed: {exc}; retry later") from exc
            store.persist(session)
            return {"masks": [_record_json(r) for r in records]}

    @app.post("/sessions/{session_id}/masks", status_code=201)
    async def add_mask_endpoint(session_id: str, request: Request):
        body = await request.json()
        prompt = _parse_prompt(body)
        session, lock = store.get(session_id)
        with lock:
            try:
                record = queue.run(session.add_mask, prompt)
            except ValueError as exc:
                raise bad_request(str(exc)) from exc
            store.persist(session)
            return _record_json(record)

    @app.post("/sessions/{session_id}/masks/{mask_id}/prompts")
    async def refine_endpoint(session_id: str, mask_id: int, request: Request):
        body = await request.json()
        prompt = _parse_prompt(body)
        session, lock = store.get(session_id)
        with lock:
            try:
                record = queue.run(session.refine_mask, mask_id, prompt)
            except MaskNotFoundError as exc:
                raise not_found(str(exc)) from exc
            except ValueError as exc:
                raise bad_request(str(exc)) from exc
            store.persist(session)
            return _record_json(record)

    @app.delete("/sessions/{session_id}/masks/{mask_id}/prompts/last")
    def undo_endpoint(session_id: str, mask_id: int):
        session, lock = store.get(session_id)
        with lock:
            try:
                record = session.undo_last_prompt(mask_id)
            except MaskNotFoundError as exc:
                raise not_found(str(exc)) from exc
            except ValueError as exc:
                raise bad_request(str(exc)) from exc
            store.persist(session)
            return _record_json(record)

    @app.delete("/sessions/{session_id}/masks/{mask_id}", status_code=204)
    def remove_endpoint(session_id: str, mask_id: int):
        session, lock = store.get(session_id)
        with lock:
            try:
                session.remove_mask(mask_id)
            except MaskNotFoundError as exc:
                raise not_found(str(exc)) from exc
            store.persist(session)
        return Response(status_code=204)

    @app.get("/sessions/{session_id}/masks/{mask_id}")
    def get_mask_endpoint(session_id: str, mask_id: int):
        session, lock = store.get(session_id)
        with lock:
            if mask_id not in session.masks:
                raise not_found(f"no mask with id {mask_id}")
            return _record_json(session.masks[mask_id])

    @app.get("/sessions/{session_id}/export")
    def export_endpoint(session_id: str):
        session, lock = store.get(session_id)
        with lock:
            try:
                return dataio.export_session(session)
            except OSError as exc:
                raise ApiError(IO_ERROR, str(exc), 500) from exc

    return app


def serve(settings: ServiceSettings | None = None):
    """Entry point for ``promptseg serve``: configuration from env vars."""
    import uvicorn

    from .model import load_checkpoint

    settings = settings or ServiceSettings.from_env()
    if not settings.checkpoint:
        raise SystemExit("PROMPTSEG_CHECKPOINT must point to a model checkpoint")
    model = load_checkpoint(settings.checkpoint)
    model.eval()
    app = create_app(model, settings)
    uvicorn.run(app, host="0.0.0.0", port=settings.port)
