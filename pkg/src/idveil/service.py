"""HTTP facade over the anonymization pipeline.

Sessions hold an uploaded image and its detections (computed once at upload);
renders are derived state. All rendering is deterministic: the same (image,
mode, seed, psi, edits) produces byte-identical PNG output, and per-detection
resampling recomposes against cached patches so pixels owned by other
detections never change.
"""

from __future__ import annotations

import base64
import binascii
import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Callable

import cv2
import numpy as np
from fastapi import FastAPI, HTTPException, Request, Response
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field

from .anonymizer import (
    AnonymizationPlan,
    RenderResult,
    anonymize_image,
    anonymize_traditional,
    derive_latent,
    plan,
    resample_entry,
)
from .detection import FusedDetection
from .editing import EditDirection, LatentCenters
from .generator import Generator

MODES = ("gan", "pixelate8", "pixelate16", "maskout")


@dataclass
class Engine:
    """Everything the service needs to turn an image into renders."""

    detect: Callable[[np.ndarray], list[FusedDetection]]
    generators: dict[str, Generator]
    directions: dict[str, EditDirection] = field(default_factory=dict)
    centers: LatentCenters | None = None


@dataclass
class ServiceConfig:
    max_upload_bytes: int = 8_000_000
    session_ttl_s: float = 3600.0
    token: str | None = None


@dataclass
class SessionState:
    image: np.ndarray
    detections: list[FusedDetection]
    created: float
    lock: threading.Lock = field(default_factory=threading.Lock)
    latents: list[np.ndarray] | None = None
    plan: AnonymizationPlan | None = None
    base: RenderResult | None = None
    render_params: dict | None = None


class EditSpec(BaseModel):
    direction: str
    strength: float = 0.0


class AnonymizeRequest(BaseModel):
    mode: str = "gan"
    seed: int = 0
    psi: float = Field(default=1.0, ge=0.0, le=1.0)
    edits: list[EditSpec] = Field(default_factory=list)


class ResampleRequest(BaseModel):
    seed: int


class UploadRequest(BaseModel):
    image_b64: str


def _decode_image(data: bytes) -> np.ndarray:
    buf = np.frombuffer(data, dtype=np.uint8)
    bgr = cv2.imdecode(buf, cv2.IMREAD_COLOR)
    if bgr is None:
        raise HTTPException(status_code=422, detail="image bytes are not decodable")
    rgb = cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)
    return rgb.astype(np.float32) / 255.0


def encode_png(image: np.ndarray) -> bytes:
    """Frame in [0, 1] to PNG bytes; quantization makes renders byte-comparable."""
    u8 = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    ok, buf = cv2.imencode(".png", cv2.cvtColor(u8, cv2.COLOR_RGB2BGR))
    if not ok:
        raise HTTPException(status_code=500, detail="png encoding failed")
    return buf.tobytes()


def _detection_summary(detections: list[FusedDetection]) -> list[dict]:
    return [
        {
            "index": i,
            "category": det.category.name,
            "bbox": [float(v) for v in det.bbox],
            "coverage": det.coverage,
            "confidence": det.confidence,
        }
        for i, det in enumerate(detections)
    ]


def create_app(engine: Engine, config: ServiceConfig | None = None) -> FastAPI:
    config = config or ServiceConfig()
    app = FastAPI(title="idveil")
    # Browser clients (the studio UI) are served from their own origin; the
    # bearer token is the only access control, so reflect any origin.
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )
    sessions: dict[str, SessionState] = {}
    store_lock = threading.Lock()

    def _check_token(request: Request) -> None:
        if config.token is None:
            return
        header = request.headers.get("authorization", "")
        if header != f"Bearer {config.token}":
            raise HTTPException(status_code=401, detail="missing or invalid token")

    def _evict_expired() -> None:
        now = time.time()
        with store_lock:
            for sid in [s for s, st in sessions.items() if now - st.created > config.session_ttl_s]:
                del sessions[sid]

    def _session(session_id: str) -> SessionState:
        _evict_expired()
        with store_lock:
            state = sessions.get(session_id)
        if state is None:
            raise HTTPException(status_code=404, detail=f"no session {session_id}")
        return state

    def _resolve_edits(edits: list[EditSpec]) -> list[tuple[np.ndarray, float]]:
        resolved = []
        for spec in edits:
            if spec.direction not in engine.directions:
                raise HTTPException(
                    status_code=422, detail=f"unknown direction {spec.direction!r}"
                )
            resolved.append((engine.directions[spec.direction].direction, spec.strength))
        return resolved

    def _render_gan(state: SessionState, seed: int, psi: float, edits: list[EditSpec]) -> RenderResult:
        if psi < 1.0 and engine.centers is None:
            raise HTTPException(status_code=422, detail="truncation requires fitted centers")
        latents = [derive_latent(seed, i) for i in range(len(state.detections))]
        plan_ = plan(state.detections, latents)
        result = anonymize_image(
            state.image,
            plan_,
            engine.generators,
            psi_centers=engine.centers,
            psi=psi,
            directions=_resolve_edits(edits),
            collect_patches=True,
        )
        state.latents = latents
        state.plan = plan_
        state.base = result
        state.render_params = {"seed": seed, "psi": psi, "edits": [e.model_dump() for e in edits]}
        return result

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "sessions": len(sessions)}

    @app.get("/directions")
    def directions(request: Request):
        _check_token(request)
        return {"directions": sorted(engine.directions)}

    @app.post("/sessions", status_code=201)
    async def create_session(request: Request):
        _check_token(request)
        content_type = request.headers.get("content-type", "")
        if content_type.startswith("multipart/form-data"):
            form = await request.form()
            upload = form.get("image")
            if upload is None:
                raise HTTPException(status_code=422, detail="multipart field 'image' required")
            data = await upload.read()
        else:
            payload = await request.json()
            try:
                body = UploadRequest(**payload)
            except Exception:
                raise HTTPException(status_code=422, detail="expected {'image_b64': ...}")
            try:
                data = base64.b64decode(body.image_b64, validate=True)
            except (binascii.Error, ValueError):
                raise HTTPException(status_code=422, detail="invalid base64 payload")
        if len(data) > config.max_upload_bytes:
            raise HTTPException(status_code=413, detail="image exceeds upload limit")
        image = _decode_image(data)
        detections = engine.detect(image)
        state = SessionState(image=image, detections=detections, created=time.time())
        session_id = uuid.uuid4().hex
        with store_lock:
            sessions[session_id] = state
        return {"session_id": session_id, "detections": _detection_summary(detections)}

    @app.post("/sessions/{session_id}/anonymize")
    def anonymize(session_id: str, body: AnonymizeRequest, request: Request):
        _check_token(request)
        if body.mode not in MODES:
            raise HTTPException(status_code=422, detail=f"mode must be one of {MODES}")
        state = _session(session_id)
        with state.lock:
            if body.mode == "gan":
                result = _render_gan(state, body.seed, body.psi, body.edits)
            else:
                plan_ = plan(state.detections, seed=body.seed)
                result = anonymize_traditional(state.image, plan_, body.mode)
            png = encode_png(result.image)
        return {
            "image_b64": base64.b64encode(png).decode("ascii"),
            "audit": result.audit,
            "mode": body.mode,
            "seed": body.seed,
            "psi": body.psi,
        }

    @app.post("/sessions/{session_id}/detections/{index}/resample")
    def resample(session_id: str, index: int, body: ResampleRequest, request: Request):
        _check_token(request)
        state = _session(session_id)
        with state.lock:
            if not 0 <= index < len(state.detections):
                raise HTTPException(status_code=404, detail=f"no detection {index}")
            if state.base is None:
                _render_gan(state, 0, 1.0, [])
            order = next(
                i for i, e in enumerate(state.plan.entries) if e.source_index == index
            )
            params = state.render_params
            new_latent = derive_latent(body.seed, index)
            result = resample_entry(
                state.image,
                state.plan,
                state.base,
                order,
                new_latent,
                engine.generators,
                psi_centers=engine.centers,
                psi=params["psi"],
                directions=_resolve_edits([EditSpec(**e) for e in params["edits"]]),
            )
            state.base = result
            state.latents[index] = new_latent
            entry = state.plan.entries[order]
            png = encode_png(result.image)
        return {
            "image_b64": base64.b64encode(png).decode("ascii"),
            "audit": result.audit,
            "detection_index": index,
            "order": order,
            "generator": entry.generator_id,
            "seed": body.seed,
        }

    return app
