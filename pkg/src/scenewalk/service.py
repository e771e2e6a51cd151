"""HTTP session service: JSON over HTTP under /v1, one writer per session.

Construction runs asynchronously (202 + status polling); steps run
synchronously under a per-session lease, so concurrent mutations get 409.
Reads are lock-free against the persisted session directory, which also
makes restarts resume cleanly from disk.
"""

from __future__ import annotations

import base64
import binascii
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from fastapi import FastAPI, Response
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from . import graph as sg
from . import imgio
from . import masks as mk
from . import metrics as mt
from . import pipeline as pl
from .backends import get_embedder
from .errors import SceneWalkError, SessionBusy, UnknownSession

MAX_IMAGE_SIDE = 512


class MaskDoc(BaseModel):
    size: list[int]
    rle: str


class ConceptDoc(BaseModel):
    name: Optional[str] = None
    level: int
    mask: Optional[MaskDoc] = None
    parent: Optional[str] = None


class CreateSessionRequest(BaseModel):
    image_png: str                        # base64 PNG bytes
    concepts: list[ConceptDoc]
    relations: Optional[list] = None      # [[kind, [a, b]], ...]
    config: Optional[dict] = None


class InstructionDoc(BaseModel):
    kind: str
    target_handle: Optional[str] = None
    description: Optional[str] = None
    mask_hint: Optional[MaskDoc] = None


class StepRequest(BaseModel):
    instruction: Optional[InstructionDoc] = None
    prompt_override: Optional[list[str]] = None


@dataclass
class _Entry:
    directory: Path
    status: str = "constructing"
    error: Optional[str] = None
    created_at: float = field(default_factory=time.time)
    updated_at: float = field(default_factory=time.time)
    lock: threading.Lock = field(default_factory=threading.Lock)
    session: Optional[pl.Session] = None


def _error_response(status_code: int, code: str, message: str) -> JSONResponse:
    return JSONResponse(status_code=status_code, content={"code": code, "message": message})


def _decode_mask(doc: Optional[MaskDoc]) -> Optional[np.ndarray]:
    if doc is None:
        return None
    return mk.rle_decode(doc.rle, (doc.size[0], doc.size[1]))


class SessionStore:
    """Directory-backed registry with per-session writer locks."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._entries: dict[str, _Entry] = {}
        self._registry_lock = threading.Lock()
        for sdir in sorted(self.root.iterdir()) if self.root.exists() else []:
            if (sdir / "session.json").exists():
                try:
                    session = pl.load_session(sdir)
                except (SceneWalkError, OSError, ValueError):
                    continue
                self._entries[session.session_id] = _Entry(
                    directory=sdir, status=session.status, session=session,
                    created_at=sdir.stat().st_mtime,
                )

    def entry(self, session_id: str) -> _Entry:
        e = self._entries.get(session_id)
        if e is None:
            raise UnknownSession(f"no session {session_id!r}")
        return e

    def session(self, session_id: str) -> pl.Session:
        e = self.entry(session_id)
        if e.session is None:
            e.session = pl.load_session(e.directory)
        return e.session

    def ids(self) -> list[str]:
        return sorted(self._entries)

    def manifest(self, session_id: str) -> dict:
        e = self.entry(session_id)
        frames = 0
        graph_version = 0
        if e.session is not None:
            frames = len(e.session.frames)
            graph_version = e.session.graph_version
        return {
            "id": session_id,
            "status": e.status if e.error is None else "error",
            "error": e.error,
            "frame_count": frames,
            "graph_version": graph_version,
            "created_at": e.created_at,
            "updated_at": e.updated_at,
        }

    def start_construction(self, body: CreateSessionRequest) -> str:
        image = imgio.image_from_png_bytes(base64.b64decode(body.image_png))
        if max(image.shape[:2]) > MAX_IMAGE_SIDE:
            raise _TooLarge(f"image {image.shape[:2]} exceeds {MAX_IMAGE_SIDE}")
        concepts = [
            (c.name, c.level, _decode_mask(c.mask), c.parent) for c in body.concepts
        ]
        relations = None
        if body.relations is not None:
            relations = [(kind, (pair[0], pair[1])) for kind, pair in body.relations]
        config = pl.SessionConfig.from_document(body.config or {})
        sg.build_graph(image, concepts, relations)  # validate spec before going async

        session_id = None
        with self._registry_lock:
            import uuid

            session_id = uuid.uuid4().hex[:12]
            directory = self.root / session_id
            entry = _Entry(directory=directory, status="constructing")
            self._entries[session_id] = entry

        def construct():
            try:
                session = pl.init_session(
                    image, concepts, relations, config, directory, session_id=session_id
                )
                entry.session = session
                entry.status = "ready"
            except Exception as exc:  # surfaced via manifest
                entry.status = "error"
                entry.error = f"{type(exc).__name__}: {exc}"
            entry.updated_at = time.time()

        threading.Thread(target=construct, daemon=True).start()
        return session_id


class _TooLarge(Exception):
    pass


def create_app(root: str | Path, static_dir: Optional[str | Path] = None) -> FastAPI:
    app = FastAPI(title="scenewalk", version="1")
    store = SessionStore(Path(root))
    app.state.store = store

    @app.exception_handler(SceneWalkError)
    async def domain_error(request, exc: SceneWalkError):
        if isinstance(exc, UnknownSession):
            return _error_response(404, exc.code, str(exc))
        if isinstance(exc, SessionBusy):
            return _error_response(409, exc.code, str(exc))
        return _error_response(422, exc.code, str(exc))

    @app.post("/v1/sessions", status_code=202)
    def create_session(body: CreateSessionRequest):
        try:
            session_id = store.start_construction(body)
        except _TooLarge as exc:
            return _error_response(413, "ImageTooLarge", str(exc))
        except (SceneWalkError, binascii.Error, ValueError, OSError) as exc:
            code = getattr(exc, "code", type(exc).__name__)
            return _error_response(400, code, str(exc))
        return store.manifest(session_id)

    @app.get("/v1/sessions")
    def list_sessions():
        return [store.manifest(sid) for sid in store.ids()]

    @app.get("/v1/sessions/{session_id}")
    def get_session(session_id: str):
        return store.manifest(session_id)

    @app.post("/v1/sessions/{session_id}/step")
    def step_session(session_id: str, body: StepRequest):
        entry = store.entry(session_id)
        if entry.status != "ready":
            return _error_response(409, "SessionBusy", f"session is {entry.status}")
        if not entry.lock.acquire(blocking=False):
            return _error_response(409, "SessionBusy", "a mutation is already in flight")
        try:
            with pl.SessionLease(entry.directory):
                session = store.session(session_id)
                instruction = None
                if body.instruction is not None:
                    try:
                        instruction = sg.RefineInstruction(
                            kind=body.instruction.kind,
                            target_handle=body.instruction.target_handle,
                            description=body.instruction.description,
                            mask_hint=_decode_mask(body.instruction.mask_hint),
                        )
                    except ValueError as exc:
                        return _error_response(422, "InvalidInstruction", str(exc))
                entry.status = "refining" if instruction is not None else "stepping"
                frame = pl.step(session, instruction=instruction, prompt_override=body.prompt_override)
                return session.frames[-1]
        finally:
            entry.status = "ready"
            entry.updated_at = time.time()
            entry.lock.release()

    @app.get("/v1/sessions/{session_id}/graph")
    def get_graph(session_id: str):
        session = store.session(session_id)
        return {"graph_version": session.graph_version, **sg.serialize(session.graph)}

    @app.get("/v1/sessions/{session_id}/frames/{index}.png")
    def get_frame_png(session_id: str, index: int):
        session = store.session(session_id)
        path = session.directory / "frames" / f"{index:03d}.png"
        if not path.exists():
            return _error_response(404, "UnknownFrame", f"no frame {index}")
        return Response(content=path.read_bytes(), media_type="image/png")

    @app.get("/v1/sessions/{session_id}/frames/{index}.json")
    def get_frame_meta(session_id: str, index: int):
        session = store.session(session_id)
        for meta in session.frames:
            if meta["index"] == index:
                return meta
        return _error_response(404, "UnknownFrame", f"no frame {index}")

    @app.get("/v1/sessions/{session_id}/metrics")
    def get_metrics(session_id: str):
        session = store.session(session_id)
        backend = get_embedder(session.config.embedder)
        initial = session.frame_image(0)
        generated = [session.frame_image(m["index"]) for m in session.frames[1:]] or [initial]
        return mt.fidelity_report(initial, generated, backend)

    @app.get("/v1/sessions/{session_id}/instructions")
    def get_instruction_log(session_id: str):
        return store.session(session_id).instruction_log

    if static_dir is not None and Path(static_dir).exists():
        from fastapi.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=str(static_dir), html=True), name="ui")

    return app
