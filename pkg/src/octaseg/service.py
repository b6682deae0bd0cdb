"""Session-based interactive segmentation over HTTP.

Each session caches one uploaded image, its encoder preprocessing, and the
image latent (the model is read-only after load, so latents never change).
Segment requests replace the session's point list and return the best mask
as run-length-encoded payload; an undo stack restores previous states.
"""

from __future__ import annotations

import hashlib
import io
import threading
import time
import uuid
from dataclasses import dataclass, field

import numpy as np
import torch
from fastapi import FastAPI, File, Form, HTTPException, UploadFile
from PIL import Image
from pydantic import BaseModel, Field

from . import TASKS
from .backbone import SegmentationModel, select_best
from .dataio import GeometricTransform, resize_and_pad, stack_layers
from .promptgen import PromptPoint, PromptPointSet
from .rle import encode as rle_encode
from .trainer import mask_to_label_space

HISTORY_DEPTH = 50


class PointIn(BaseModel):
    x: int
    y: int
    polarity: int = Field(ge=0, le=1)


class SegmentIn(BaseModel):
    points: list[PointIn] = Field(default_factory=list)
    mode: str = "global"


@dataclass
class SessionState:
    points: list[PointIn] = field(default_factory=list)
    rle: list[int] | None = None
    confidence: float | None = None


@dataclass
class Session:
    id: str
    image: np.ndarray  # (H, W, 3) original resolution
    task: str
    mode: str
    enc_transform: GeometricTransform
    latent: torch.Tensor
    current: SessionState = field(default_factory=SessionState)
    history: list[SessionState] = field(default_factory=list)
    lock: threading.Lock = field(default_factory=threading.Lock)


def _decode_upload(data: bytes) -> np.ndarray:
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except Exception as exc:
        raise HTTPException(status_code=400, detail=f"undecodable image: {exc}") from exc
    arr = np.asarray(img.convert("RGB") if img.mode not in ("L", "RGB") else img)
    if arr.ndim == 2:
        return stack_layers([arr.astype(np.float32) / 255.0])
    return arr.astype(np.float32) / 255.0


def create_app(
    model: SegmentationModel,
    default_task: str = "RV",
    checkpoint_hash: str = "none",
    adapter_rank: int | None = None,
    max_workers: int = 2,
) -> FastAPI:
    app = FastAPI(title="octaseg inference service")
    sessions: dict[str, Session] = {}
    registry_lock = threading.Lock()
    worker_slots = threading.Semaphore(max_workers)
    variant = "tiny" if model.description.input_side <= 256 else "full"

    def get_session(session_id: str) -> Session:
        with registry_lock:
            session = sessions.get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id}")
        return session

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.get("/model")
    def model_info():
        return {
            "variant": variant,
            "rank": adapter_rank,
            "task": default_task,
            "checkpoint": checkpoint_hash,
        }

    @app.post("/sessions")
    def create_session(
        image: UploadFile = File(...),
        task: str | None = Form(default=None),
        mode: str = Form(default="global"),
    ):
        chosen_task = task or default_task
        if chosen_task not in TASKS:
            raise HTTPException(status_code=400, detail=f"unknown task {chosen_task!r}")
        if mode not in ("global", "local"):
            raise HTTPException(status_code=400, detail=f"unknown mode {mode!r}")
        arr = _decode_upload(image.file.read())
        enc_image, tf = resize_and_pad(arr, model.description.input_side)
        with torch.no_grad():
            latent = model.encode_image(enc_image)
        session = Session(
            id=uuid.uuid4().hex,
            image=arr,
            task=chosen_task,
            mode=mode,
            enc_transform=tf,
            latent=latent,
        )
        with registry_lock:
            sessions[session.id] = session
        return {"id": session.id, "h": arr.shape[0], "w": arr.shape[1]}

    @app.post("/sessions/{session_id}/segment")
    def segment(session_id: str, body: SegmentIn):
        session = get_session(session_id)
        h, w = session.image.shape[:2]
        bad = [i for i, p in enumerate(body.points) if not (0 <= p.x < w and 0 <= p.y < h)]
        if bad:
            raise HTTPException(status_code=400, detail=f"points out of bounds: indices {bad}")
        if not worker_slots.acquire(blocking=False):
            raise HTTPException(status_code=503, detail="busy: all inference workers in use")
        try:
            with session.lock:
                start = time.perf_counter()
                point_set = PromptPointSet(
                    points=[PromptPoint(p.x, p.y, p.polarity) for p in body.points]
                )
                with torch.no_grad():
                    prompt = model.encode_prompts(point_set, session.enc_transform)
                    pred = model.decode_mask(session.latent, prompt)
                    best, confidence = select_best(pred)
                    soft = mask_to_label_space(
                        best, session.enc_transform, (h, w), model.description.input_side
                    )
                mask = (soft.numpy() > 0.5).astype(np.uint8)
                runs = rle_encode(mask)
                elapsed_ms = (time.perf_counter() - start) * 1000.0
                session.history.append(session.current)
                if len(session.history) > HISTORY_DEPTH:
                    session.history.pop(0)
                session.current = SessionState(
                    points=list(body.points), rle=runs, confidence=confidence
                )
                session.mode = body.mode
            return {"rle": runs, "h": h, "w": w, "confidence": confidence, "ms": elapsed_ms}
        finally:
            worker_slots.release()

    @app.post("/sessions/{session_id}/undo")
    def undo(session_id: str):
        session = get_session(session_id)
        with session.lock:
            h, w = session.image.shape[:2]
            if not session.history:
                return {"noop": True, "h": h, "w": w}
            session.current = session.history.pop()
            cur = session.current
            return {
                "noop": False,
                "rle": cur.rle,
                "h": h,
                "w": w,
                "confidence": cur.confidence,
                "points": [p.model_dump() for p in cur.points],
            }

    return app


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()
