"""Command-line front door: construct, generate, refine, eval, serve.

Exit codes: 0 success, 1 domain error (printed as {code, message}), 2 usage
or I/O error. All informational output honors --json.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import graph as sg
from . import imgio
from . import masks as mk
from . import metrics as mt
from . import pipeline as pl
from .backends import get_embedder
from .errors import SceneWalkError


def _emit(payload: dict, as_json: bool) -> None:
    if as_json:
        click.echo(json.dumps(payload))
    else:
        for key, value in payload.items():
            click.echo(f"{key}: {value}")


def _domain_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except SceneWalkError as exc:
            click.echo(json.dumps({"code": exc.code, "message": str(exc)}), err=True)
            sys.exit(1)

    return wrapper


def _parse_mask(doc, size) -> np.ndarray:
    if "rle" in doc:
        h, w = doc.get("size", size)
        return mk.rle_decode(doc["rle"], (h, w))
    if "rect" in doc:
        r0, c0, r1, c1 = doc["rect"]
        m = np.zeros(size, dtype=np.uint8)
        m[r0:r1, c0:c1] = 1
        return m
    raise click.UsageError(f"mask document needs 'rle' or 'rect': {doc}")


def _load_spec(path: Path, size) -> tuple[list, list | None]:
    doc = json.loads(path.read_text())
    concepts = []
    for c in doc.get("concepts", []):
        mask = _parse_mask(c["mask"], size) if c.get("mask") is not None else None
        concepts.append((c.get("name"), c["level"], mask, c.get("parent")))
    relations = None
    if "relations" in doc and doc["relations"] is not None:
        relations = [(kind, (pair[0], pair[1])) for kind, pair in doc["relations"]]
    return concepts, relations


@click.group()
def main():
    """Perpetual scene-view generation sessions."""


@main.command()
@click.option("--image", "image_path", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--spec", "spec_path", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True, path_type=Path))
@click.option("--json", "as_json", is_flag=True)
@_domain_errors
def construct(image_path, spec_path, out_dir, config_path, as_json):
    """Build the concept graph and customize the model for one image."""
    image = imgio.load_png(image_path)
    concepts, relations = _load_spec(spec_path, image.shape[:2])
    config_doc = json.loads(config_path.read_text()) if config_path else {}
    config = pl.SessionConfig.from_document(config_doc)
    with pl.SessionLease(_prepared(out_dir)):
        session = pl.init_session(image, concepts, relations, config, out_dir)
    _emit({"session": session.session_id, "directory": str(out_dir), "frames": 1}, as_json)


def _prepared(directory: Path) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    return directory


@main.command()
@click.option("--session", "session_dir", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--frames", type=click.IntRange(min=0), required=True)
@click.option("--trajectory", type=click.Choice(["recede", "translate", "orbit"]))
@click.option("--seed", type=int)
@click.option("--json", "as_json", is_flag=True)
@_domain_errors
def generate(session_dir, frames, trajectory, seed, as_json):
    """Append frames along the session trajectory; resumable."""
    with pl.SessionLease(session_dir):
        session = pl.load_session(session_dir)
        if trajectory is not None or seed is not None:
            if len(session.frames) > 1:
                raise SceneWalkError("trajectory/seed can only change before the first generated frame")
            updates = {}
            if trajectory is not None:
                updates["trajectory"] = pl.TrajectorySpec(
                    kind=trajectory,
                    step_size=session.config.trajectory.step_size,
                    max_steps=session.config.trajectory.max_steps,
                    orbit_radius=session.config.trajectory.orbit_radius,
                )
            if seed is not None:
                updates["seed"] = seed
            session.config = pl.SessionConfig(**{**session.config.to_document(), **updates})
            session.config = pl.SessionConfig.from_document(session.config.to_document())
            pl.save_session(session)
        produced = pl.run(session, frames)
    _emit(
        {
            "session": session.session_id,
            "generated": len(produced),
            "frame_count": len(session.frames),
        },
        as_json,
    )


@main.command()
@click.option("--session", "session_dir", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--add", "add_desc")
@click.option("--change", "change_args", nargs=2, type=str)
@click.option("--mute", "mute_handle")
@click.option("--now", "apply_now", is_flag=True, help="refine the latest frame immediately")
@click.option("--json", "as_json", is_flag=True)
@_domain_errors
def refine(session_dir, add_desc, change_args, mute_handle, apply_now, as_json):
    """Queue (or immediately apply) an add/change/mute instruction."""
    chosen = [x for x in (add_desc, change_args or None, mute_handle) if x]
    if len(chosen) != 1:
        raise click.UsageError("exactly one of --add / --change / --mute is required")
    if add_desc:
        instruction = sg.RefineInstruction("add", description=add_desc)
    elif change_args:
        instruction = sg.RefineInstruction("change", target_handle=change_args[0], description=change_args[1])
    else:
        instruction = sg.RefineInstruction("mute", target_handle=mute_handle)
    with pl.SessionLease(session_dir):
        session = pl.load_session(session_dir)
        if apply_now:
            pl.refine_now(session, instruction)
            mode = "applied"
        else:
            pl.queue_instruction(session, instruction)
            mode = "queued"
    _emit(
        {
            "session": session.session_id,
            "instruction": instruction.kind,
            "mode": mode,
            "graph_version": session.graph_version,
        },
        as_json,
    )


@main.command("eval")
@click.option("--session", "session_dir", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--backend", default=None, help="embedding backend id (defaults to the session config)")
@click.option("--json", "as_json", is_flag=True)
@_domain_errors
def eval_cmd(session_dir, backend, as_json):
    """Scene-fidelity report for the session's generated frames."""
    session = pl.load_session(session_dir)
    try:
        embedder = get_embedder(backend or session.config.embedder)
    except KeyError as exc:
        raise click.UsageError(str(exc))
    initial = session.frame_image(0)
    generated = [session.frame_image(m["index"]) for m in session.frames[1:]] or [initial]
    report = mt.fidelity_report(initial, generated, embedder)
    _emit(report, as_json)


@main.command()
@click.option("--session", "session_dir", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--json", "as_json", is_flag=True)
@_domain_errors
def validate(session_dir, as_json):
    """Check a session directory against the on-disk schema."""
    doc = pl.validate_session_directory(session_dir)
    _emit({"session": doc["id"], "valid": True, "frame_count": len(doc["frames"])}, as_json)


@main.command()
@click.option("--port", type=click.IntRange(1, 65535), default=8000)
@click.option("--root", type=click.Path(path_type=Path), required=True)
@click.option("--ui", "ui_dir", type=click.Path(path_type=Path), default=None)
def serve(port, root, ui_dir):
    """Serve the HTTP session API (and the browser UI when built)."""
    import uvicorn

    from .service import create_app

    app = create_app(_prepared(root), static_dir=ui_dir)
    uvicorn.run(app, host="127.0.0.1", port=port)


if __name__ == "__main__":
    main()
