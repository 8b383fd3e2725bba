from __future__ import annotations

import logging
import os
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path
from typing import Dict, List, Optional

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from .config import settings
from .images import load_image
from .models import FrameResult, ShapeParams
from .pipeline import init_tracker, list_frames, track_files
from .probsource import make_source
from .state import SessionRecord, SessionStore, TrackerState
from .storage import load_cascade, load_rig, load_segnet

logging.basicConfig(level=getattr(logging, settings.log_level.upper(), logging.INFO))
logger = logging.getLogger("capture")

app = FastAPI(title="Face Capture Control", version="0.1.0")

session_executor = ThreadPoolExecutor(max_workers=int(os.getenv("CAPTURE_SESSION_WORKERS", "2")))
identity_executor = ThreadPoolExecutor(max_workers=max(1, settings.identity_workers))
session_store = SessionStore()
session_futures: Dict[str, Future] = {}


class SessionRequest(BaseModel):
    frames: str
    rig: str
    model: str
    out_dir: Optional[str] = None
    prob_source: Optional[str] = None
    prob_dir: Optional[str] = None
    segnet: Optional[str] = None
    init: Optional[str] = None
    depth: float = 0.3
    sync_identity: bool = False


class SessionStatus(BaseModel):
    session_id: str
    frames_dir: str
    out_dir: Optional[str]
    status: str
    frames_total: int
    frames_done: int
    keyframes: int
    identity_status: str
    last_timings: Dict[str, float]
    error: Optional[str] = None


def _status(record: SessionRecord) -> SessionStatus:
    return SessionStatus(**asdict(record))


@app.get("/healthz")
async def healthcheck() -> dict:
    return {"status": "ok"}


@app.post("/api/v1/sessions", response_model=SessionStatus)
async def start_session(payload: SessionRequest) -> SessionStatus:
    for label, path in (("rig", payload.rig), ("model", payload.model)):
        if not Path(path).exists():
            raise HTTPException(status_code=400, detail=f"{label} file {path} not found")
    record = session_store.create(payload.frames, payload.out_dir)
    session_futures[record.session_id] = session_executor.submit(_run_session, record.session_id, payload)
    logger.info("Queued session %s for %s", record.session_id, payload.frames)
    return _status(record)


@app.get("/api/v1/sessions", response_model=List[SessionStatus])
async def list_sessions() -> List[SessionStatus]:
    return [_status(record) for record in session_store.list_sessions()]


@app.get("/api/v1/sessions/{session_id}", response_model=SessionStatus)
async def get_session(session_id: str) -> SessionStatus:
    record = session_store.find(session_id)
    if record is None:
        raise HTTPException(status_code=404, detail=f"Unknown session {session_id}")
    return _status(record)


def _run_session(session_id: str, payload: SessionRequest) -> None:
    cfg = settings
    if payload.prob_source:
        cfg = replace(cfg, prob_source=payload.prob_source)
    if payload.prob_dir:
        cfg = replace(cfg, prob_dir=payload.prob_dir)
    if payload.segnet:
        cfg = replace(cfg, segnet_checkpoint=payload.segnet)
    try:
        paths = list_frames(payload.frames)
        session_store.update(session_id, status="running", frames_total=len(paths))
        rig = load_rig(payload.rig)
        model = load_cascade(payload.model)
        net = load_segnet(cfg.segnet_checkpoint) if cfg.prob_source == "net" and cfg.segnet_checkpoint else None
        source = make_source(cfg.prob_source, net=net, directory=cfg.prob_dir)
        height, width = load_image(paths[0]).shape[:2]
        if payload.init:
            params = ShapeParams.from_text(Path(payload.init).read_text())
        else:
            params = ShapeParams.neutral(
                rig.n_expressions, rig.n_landmarks, rig.n_identity, focal=float(width), depth=payload.depth
            )
        executor = None if payload.sync_identity else identity_executor
        state = init_tracker(params, rig, model, (width, height), executor=executor, cfg=cfg)

        def progress(index: int, result: FrameResult, current: TrackerState) -> None:
            session_store.update(
                session_id,
                frames_done=index + 1,
                keyframes=len(current.keyframes),
                identity_status=current.identity_status.value,
                last_timings=dict(result.timings),
            )

        track_files(paths, source, state, payload.out_dir, cfg, on_frame=progress)
    except Exception as exc:
        logger.exception("Session %s failed", session_id)
        session_store.update(session_id, status="failed", error=str(exc))
        return
    session_store.update(session_id, status="done")
    logger.info("Session %s finished", session_id)


@app.on_event("shutdown")
async def shutdown_event() -> None:
    session_executor.shutdown(wait=False)
    identity_executor.shutdown(wait=False)
