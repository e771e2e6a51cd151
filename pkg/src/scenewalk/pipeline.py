"""Session orchestration: construct, perpetual generate loop, refinement.

A session owns one linear camera trajectory over one growing point-cloud
scene. Each step renders the scene at the next camera, outpaints the holes,
optionally applies one refine instruction (training the affected relation
edge on the freshly generated frame), then lifts the newly generated pixels
back into the scene.

Everything a session needs to reproduce itself bit-exactly lives in its
directory: config + seed + instruction log in ``session.json``, graph
snapshots under ``graph/``, model checkpoints under ``ckpt/``, lossless
frames under ``frames/``, the accumulated point cloud in ``scene.xyzrgb``
and the per-step training log in ``train.log``.
"""

from __future__ import annotations

import json
import os
import time
import uuid
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import backends as bk
from . import geometry as ge
from . import graph as sg
from . import imgio
from . import masks as mk
from . import training as tr
from .diffusion import (
    EmbeddingTable,
    LatentCodec,
    NoiseSchedule,
    ToyDenoiser,
    load_checkpoint,
    save_checkpoint,
)
from .errors import (
    ConstructionDiverged,
    DivergedLoss,
    SceneWalkError,
    SegmentationEmpty,
    SessionBusy,
    TrajectoryExhausted,
)
from .outpaint import OutpaintRequest, to_outpainter

SESSION_SCHEMA_VERSION = 1
LEASE_STALE_SECONDS = 300.0


@dataclass(frozen=True)
class TrajectorySpec:
    kind: str = "recede"
    step_size: float = 0.1
    max_steps: int = 50
    orbit_radius: float = 1.0


@dataclass(frozen=True)
class SessionConfig:
    seed: int = 0
    latent_factor: int = 4
    token_dim: int = 8
    hidden: int = 8
    attn_dim: int = 8
    timesteps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    outpaint_steps: int = 30
    pixel_composite: bool = True
    lambda_prior: float = 1.0
    lambda_attn: float = 0.01
    train: tr.TrainConfig = field(default_factory=tr.TrainConfig)
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    depth_backend: str = "ramp"
    segmenter: str = "bright"
    embedder: str = "toy"
    auto_refine: bool = False
    unproject_policy: str = "new_only"  # "new_only" | "all"

    def to_document(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_document(doc: dict) -> "SessionConfig":
        doc = dict(doc)
        doc["train"] = tr.TrainConfig(**doc.get("train", {}))
        doc["trajectory"] = TrajectorySpec(**doc.get("trajectory", {}))
        return SessionConfig(**doc)

    def loss_weights(self) -> tr.LossWeights:
        return tr.LossWeights(lambda_prior=self.lambda_prior, lambda_attn=self.lambda_attn)


@dataclass(frozen=True)
class Frame:
    index: int
    image: np.ndarray           # I_i, quantized to the PNG grid
    depth: np.ndarray           # aligned depth used for unprojection
    camera: ge.Camera
    partial: np.ndarray         # rendered partial image at this camera
    fill_mask: np.ndarray       # 1 = outpainted
    prompt_tokens: tuple[str, ...]


@dataclass
class Session:
    directory: Path
    session_id: str
    config: SessionConfig
    graph: sg.SceneConceptGraph
    graph_version: int
    model: ToyDenoiser
    table: EmbeddingTable
    ckpt_version: int
    scene: ge.PointCloudScene
    frames: list[dict]              # persisted frame metadata
    instruction_log: list[dict]
    status: str = "ready"
    pending_instruction: Optional[dict] = None  # applied at the next step boundary

    @property
    def codec(self) -> LatentCodec:
        return LatentCodec(self.config.latent_factor)

    @property
    def reference_size(self) -> tuple[int, int]:
        return self.graph.reference_size

    def camera_for(self, index: int) -> ge.Camera:
        spec = self.config.trajectory
        if index > spec.max_steps:
            raise TrajectoryExhausted(f"trajectory ends after {spec.max_steps} steps")
        start = ge.Camera.default(self.reference_size)
        return ge.make_trajectory(
            spec.kind, index, spec.step_size, start, orbit_radius=spec.orbit_radius
        )[index]

    def frame_image(self, index: int) -> np.ndarray:
        return imgio.load_png(self.directory / "frames" / f"{index:03d}.png")

    def frame_depth(self, index: int) -> np.ndarray:
        return imgio.load_depth(self.directory / "frames" / f"{index:03d}.depth.npyish")


def _frame_seed(seed: int, index: int) -> int:
    return (seed * 1_000_003 + index * 7_919 + 17) % (2**31)


# --- prompt assembly ---


def assemble_prompt(graph: sg.SceneConceptGraph, focus_edge: Optional[str] = None) -> tuple[str, ...]:
    """Default prompt: level-1 handle, then (R1 edge handle, level-2 handle)
    per unmuted level-2 node in node order; a focus edge yields its triple."""
    if focus_edge is not None:
        return sg.prompt_triple(graph, focus_edge).tokens
    level1 = graph.level_one()
    tokens: list[str] = [] if level1.muted else [level1.handle]
    r1_by_node = {}
    for e in graph.edges:
        if e.kind == "R1":
            other = e.endpoints[0] if e.endpoints[1] == level1.id else e.endpoints[1]
            r1_by_node[other] = e
    for node in graph.nodes:
        if node.level != 2 or node.muted:
            continue
        edge = r1_by_node.get(node.id)
        if edge is not None and not level1.muted:
            tokens.append(edge.handle)
        tokens.append(node.handle)
    return tuple(tokens)


# --- session lease (single writer across processes) ---


class SessionLease:
    def __init__(self, directory: Path):
        self.path = Path(directory) / ".lease"
        self.acquired = False

    def __enter__(self) -> "SessionLease":
        self.acquire()
        return self

    def __exit__(self, *exc) -> None:
        self.release()

    def acquire(self) -> None:
        for _ in range(2):
            try:
                fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
                with os.fdopen(fd, "w") as fh:
                    fh.write(json.dumps({"pid": os.getpid(), "time": time.time()}))
                self.acquired = True
                return
            except FileExistsError:
                if self._stale():
                    self.path.unlink(missing_ok=True)
                    continue
                raise SessionBusy(f"session is locked by {self.path}")
        raise SessionBusy(f"session is locked by {self.path}")

    def _stale(self) -> bool:
        try:
            info = json.loads(self.path.read_text())
        except (OSError, json.JSONDecodeError):
            return True
        if time.time() - info.get("time", 0) < LEASE_STALE_SECONDS:
            # holder may still be alive; respect recent leases from live pids
            try:
                os.kill(int(info.get("pid", -1)), 0)
                return False
            except (OSError, ValueError):
                return True
        return True

    def release(self) -> None:
        if self.acquired:
            self.path.unlink(missing_ok=True)
            self.acquired = False


# --- persistence ---


def _write_json(path: Path, doc: dict) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, indent=1))
    os.replace(tmp, path)


def save_session(session: Session) -> None:
    doc = {
        "version": SESSION_SCHEMA_VERSION,
        "id": session.session_id,
        "status": session.status,
        "config": session.config.to_document(),
        "graph_version": session.graph_version,
        "ckpt_version": session.ckpt_version,
        "frames": session.frames,
        "instruction_log": session.instruction_log,
        "pending_instruction": session.pending_instruction,
    }
    _write_json(session.directory / "session.json", doc)


def _persist_graph(session: Session) -> None:
    _write_json(
        session.directory / "graph" / f"{session.graph_version:03d}.json",
        sg.serialize(session.graph),
    )


def _persist_ckpt(session: Session) -> None:
    save_checkpoint(
        session.directory / "ckpt" / f"{session.ckpt_version:03d}.bin",
        session.model,
        session.table,
    )


def _persist_scene(session: Session) -> None:
    (session.directory / "scene.xyzrgb").write_text(ge.export_xyzrgb(session.scene))


def _persist_frame(session: Session, frame: Frame) -> None:
    frames_dir = session.directory / "frames"
    imgio.save_png(frames_dir / f"{frame.index:03d}.png", frame.image)
    imgio.save_depth(frames_dir / f"{frame.index:03d}.depth.npyish", frame.depth)
    session.frames.append(
        {
            "index": frame.index,
            "camera": frame.camera.to_document(),
            "prompt_tokens": list(frame.prompt_tokens),
            "fill_mask": {"size": list(frame.fill_mask.shape), "rle": mk.rle_encode(frame.fill_mask)},
            "graph_version": session.graph_version,
            "ckpt_version": session.ckpt_version,
        }
    )


def load_session(directory: str | Path) -> Session:
    directory = Path(directory)
    doc = json.loads((directory / "session.json").read_text())
    config = SessionConfig.from_document(doc["config"])
    graph = sg.deserialize(
        json.loads((directory / "graph" / f"{doc['graph_version']:03d}.json").read_text())
    )
    model, table = load_checkpoint(directory / "ckpt" / f"{doc['ckpt_version']:03d}.bin")
    scene_path = directory / "scene.xyzrgb"
    scene = ge.import_xyzrgb(scene_path.read_text()) if scene_path.exists() else ge.PointCloudScene.empty()
    return Session(
        directory=directory,
        session_id=doc["id"],
        config=config,
        graph=graph,
        graph_version=doc["graph_version"],
        model=model,
        table=table,
        ckpt_version=doc["ckpt_version"],
        scene=scene,
        frames=doc["frames"],
        instruction_log=doc["instruction_log"],
        status=doc.get("status", "ready"),
        pending_instruction=doc.get("pending_instruction"),
    )


# --- construction ---


def init_session(
    image: np.ndarray,
    concepts: Sequence[tuple],
    relations: Optional[Sequence[tuple]],
    config: SessionConfig,
    directory: str | Path,
    session_id: Optional[str] = None,
) -> Session:
    """Build the graph, customize the model, lift frame 0 into the scene."""
    directory = Path(directory)
    for sub in ("graph", "ckpt", "frames"):
        (directory / sub).mkdir(parents=True, exist_ok=True)

    image0 = imgio.quantize(image)
    graph = sg.build_graph(image0, concepts, relations)
    size = graph.reference_size
    codec = LatentCodec(config.latent_factor)
    schedule = NoiseSchedule.linear(config.timesteps, config.beta_start, config.beta_end)
    model = ToyDenoiser(
        codec.latent_shape(size),
        schedule,
        token_dim=config.token_dim,
        hidden=config.hidden,
        attn_dim=config.attn_dim,
        init_seed=config.seed,
    )
    table = EmbeddingTable(config.token_dim)
    tr.ensure_handle_embeddings(table, graph)

    log_path = directory / "train.log"
    if config.train.phase1_steps + config.train.phase2_steps > 0:
        with log_path.open("a") as fh:
            def log(record: dict) -> None:
                fh.write(json.dumps(record) + "\n")

            try:
                model, table = tr.train_construction(
                    graph, image0, model, table,
                    config.train, config.loss_weights(), codec=codec, log=log,
                )
            except DivergedLoss as exc:
                raise ConstructionDiverged(str(exc)) from exc
    else:
        log_path.touch()

    depth_backend = bk.get_depth_backend(config.depth_backend)
    depth0 = depth_backend.depth(image0)
    camera0 = ge.Camera.default(size)
    scene = ge.unproject(image0, depth0, camera0, frame_index=0)

    session = Session(
        directory=directory,
        session_id=session_id or uuid.uuid4().hex[:12],
        config=config,
        graph=graph,
        graph_version=0,
        model=model,
        table=table,
        ckpt_version=0,
        scene=scene,
        frames=[],
        instruction_log=[],
        status="ready",
    )
    frame0 = Frame(
        index=0,
        image=image0,
        depth=depth0,
        camera=camera0,
        partial=image0,
        fill_mask=np.zeros(size, dtype=np.uint8),
        prompt_tokens=assemble_prompt(graph),
    )
    _persist_graph(session)
    _persist_ckpt(session)
    _persist_frame(session, frame0)
    _persist_scene(session)
    save_session(session)
    return session


# --- the generate / refine step ---


def step(
    session: Session,
    instruction: Optional[sg.RefineInstruction] = None,
    prompt_override: Optional[Sequence[str]] = None,
) -> Frame:
    """Advance one frame; optionally apply a refine instruction afterwards.

    On refinement failure the freshly generated frame stays committed, the
    graph/model roll back to the pre-instruction snapshot, and the error
    propagates.
    """
    if not session.frames:
        raise SceneWalkError("session has no frames; construct it first")
    if instruction is None and session.pending_instruction is not None:
        instruction = sg.RefineInstruction.from_document(session.pending_instruction)
        session.pending_instruction = None
    index = len(session.frames)
    camera = session.camera_for(index)
    rendered = ge.render(session.scene, camera)

    overridden = prompt_override is not None
    tokens = tuple(prompt_override) if overridden else assemble_prompt(session.graph)
    for tok in tokens:
        session.table.add(tok)  # free-text override tokens get frozen vectors

    painter = to_outpainter(
        session.model, session.table,
        codec=session.codec, pixel_composite=session.config.pixel_composite,
    )
    raw = painter(
        OutpaintRequest(
            partial_image=rendered.partial_image,
            fill_mask=rendered.fill_mask,
            prompt_tokens=tokens,
            seed=_frame_seed(session.config.seed, index),
            steps=session.config.outpaint_steps,
        )
    )
    image = imgio.quantize(raw)

    refine_error: Optional[SceneWalkError] = None
    if instruction is not None:
        try:
            _apply_refinement(session, instruction, image, index)
        except SceneWalkError as exc:
            refine_error = exc
    elif session.config.auto_refine:
        _auto_refine(session, image)

    depth_backend = bk.get_depth_backend(session.config.depth_backend)
    raw_depth = depth_backend.depth(image)
    if (rendered.fill_mask == 0).any():
        depth = ge.align_depth(raw_depth, rendered)
    else:
        depth = raw_depth

    if session.config.unproject_policy == "all":
        select = None
    else:
        select = rendered.fill_mask
    new_points = ge.unproject(image, depth, camera, frame_index=index, select=select)
    session.scene = ge.merge(session.scene, new_points)

    frame = Frame(
        index=index,
        image=image,
        depth=depth,
        camera=camera,
        partial=rendered.partial_image,
        fill_mask=rendered.fill_mask,
        prompt_tokens=tokens,
    )
    _persist_frame(session, frame)
    if overridden:
        session.frames[-1]["prompt_override"] = list(tokens)
    _persist_scene(session)
    save_session(session)
    if refine_error is not None:
        raise refine_error
    return frame


def _apply_refinement(
    session: Session,
    instruction: sg.RefineInstruction,
    image: np.ndarray,
    frame_index: int,
) -> None:
    """Mutate graph + model for one instruction; rolls back on failure."""
    segmenter_backend = bk.get_segmenter(session.config.segmenter)

    def segment(description: str, hint):
        return segmenter_backend.segment(image, description, hint)

    old_graph, old_model, old_table = session.graph, session.model, session.table
    try:
        new_graph, edge_id, _new_handles = sg.apply_instruction(
            session.graph, instruction, segment
        )
        if instruction.kind == "change":
            # refresh the target's mask from the newly generated frame
            target = new_graph.node_by_handle(instruction.target_handle)
            mask = instruction.mask_hint
            if mask is None:
                mask = segment(instruction.description or target.handle.strip("<>"), None)
            mask = mk.as_mask(mask)
            if not mask.any():
                raise SegmentationEmpty(f"empty mask for {instruction.target_handle!r}")
            if mask.shape != new_graph.reference_size:
                raise SceneWalkError("segmented mask size mismatch")
            nodes = tuple(
                replace(n, mask=mask) if n.id == target.id else n for n in new_graph.nodes
            )
            new_graph = sg.SceneConceptGraph(nodes, new_graph.edges, new_graph.reference_size)
            sg.validate(new_graph)
        session.graph = new_graph
        if edge_id is not None:
            model, table = tr.train_refine(
                new_graph, edge_id, image,
                session.model, session.table,
                session.config.train, session.config.loss_weights(),
                codec=session.codec, log=_train_logger(session),
            )
            session.model = model
            session.table = table
    except SceneWalkError:
        session.graph, session.model, session.table = old_graph, old_model, old_table
        raise
    session.graph_version += 1
    session.ckpt_version += 1
    session.instruction_log.append(
        {"frame_index": frame_index, "instruction": instruction.to_document()}
    )
    _persist_graph(session)
    _persist_ckpt(session)


def _auto_refine(session: Session, image: np.ndarray) -> None:
    """Unconditional per-step alignment on a default edge (auto_refine on).

    Uses the R1 edge of the first unmuted level-2 node; keeps the
    graph-snapshot / checkpoint pairing by versioning both.
    """
    level1 = session.graph.level_one()
    edge_id = None
    for e in session.graph.edges:
        if e.kind != "R1":
            continue
        nodes = [session.graph.node(i) for i in e.endpoints]
        if any(n.muted for n in nodes) or level1.muted:
            continue
        edge_id = e.id
        break
    if edge_id is None:
        return
    model, table = tr.train_refine(
        session.graph, edge_id, image,
        session.model, session.table,
        session.config.train, session.config.loss_weights(),
        codec=session.codec, log=_train_logger(session),
    )
    session.model = model
    session.table = table
    session.graph_version += 1
    session.ckpt_version += 1
    _persist_graph(session)
    _persist_ckpt(session)


def _train_logger(session: Session):
    path = session.directory / "train.log"

    def log(record: dict) -> None:
        with path.open("a") as fh:
            fh.write(json.dumps(record) + "\n")

    return log


def run(session: Session, n_frames: int) -> list[Frame]:
    """n successive instruction-free steps."""
    return [step(session) for _ in range(n_frames)]


def refine_now(session: Session, instruction: sg.RefineInstruction) -> None:
    """Apply an instruction immediately against the latest frame."""
    if not session.frames:
        raise SceneWalkError("session has no frames; construct it first")
    index = session.frames[-1]["index"]
    _apply_refinement(session, instruction, session.frame_image(index), index)
    save_session(session)


def queue_instruction(session: Session, instruction: sg.RefineInstruction) -> None:
    """Record an instruction to be applied at the next step boundary."""
    if instruction.kind in ("change", "mute"):
        session.graph.node_by_handle(instruction.target_handle)  # raises UnknownHandle
    session.pending_instruction = instruction.to_document()
    save_session(session)


def validate_session_directory(directory: str | Path) -> dict:
    """Check the on-disk layout and schemas; returns the session manifest.

    Raises SceneWalkError subclasses (or OSError) on any malformed artifact.
    """
    directory = Path(directory)
    doc = json.loads((directory / "session.json").read_text())
    if doc.get("version") != SESSION_SCHEMA_VERSION:
        raise SceneWalkError(f"unsupported session schema version {doc.get('version')!r}")
    SessionConfig.from_document(doc["config"])
    for v in range(doc["graph_version"] + 1):
        sg.deserialize(json.loads((directory / "graph" / f"{v:03d}.json").read_text()))
    for v in range(doc["ckpt_version"] + 1):
        load_checkpoint(directory / "ckpt" / f"{v:03d}.bin")
    for meta in doc["frames"]:
        idx = meta["index"]
        image = imgio.load_png(directory / "frames" / f"{idx:03d}.png")
        depth = imgio.load_depth(directory / "frames" / f"{idx:03d}.depth.npyish")
        if image.shape[:2] != depth.shape:
            raise SceneWalkError(f"frame {idx} image/depth size mismatch")
        ge.Camera.from_document(meta["camera"])
        h, w = meta["fill_mask"]["size"]
        mk.rle_decode(meta["fill_mask"]["rle"], (h, w))
    if not (directory / "scene.xyzrgb").exists():
        raise SceneWalkError("missing scene.xyzrgb")
    if not (directory / "train.log").exists():
        raise SceneWalkError("missing train.log")
    return doc


# --- replay ---


def replay_session(directory: str | Path, out_directory: str | Path) -> Session:
    """Reproduce a session from its persisted config, seed and instruction log."""
    source = load_session(directory)
    graph0 = sg.deserialize(
        json.loads((Path(directory) / "graph" / "000.json").read_text())
    )
    image0 = imgio.load_png(Path(directory) / "frames" / "000.png")
    concepts = [
        (n.handle[1:-1], n.level, None if n.level == 1 else np.asarray(n.mask),
         graph0.node(n.parent_region).handle[1:-1] if n.parent_region else None)
        for n in graph0.nodes
    ]
    relations = [
        (e.kind, (graph0.node(e.endpoints[0]).handle[1:-1], graph0.node(e.endpoints[1]).handle[1:-1]))
        for e in graph0.edges
    ]
    fresh = init_session(
        image0, concepts, relations, source.config, out_directory, session_id=source.session_id
    )
    by_frame = {}
    for entry in source.instruction_log:
        by_frame.setdefault(entry["frame_index"], []).append(
            sg.RefineInstruction.from_document(entry["instruction"])
        )
    for ins in by_frame.get(0, []):
        refine_now(fresh, ins)
    for meta in source.frames[1:]:
        idx = meta["index"]
        pending = by_frame.get(idx, [])
        step(
            fresh,
            instruction=pending[0] if pending else None,
            prompt_override=meta.get("prompt_override"),
        )
        for ins in pending[1:]:
            refine_now(fresh, ins)
    return fresh
