"""Lossless raster and depth-map file formats used by session directories.

Images travel as float64 (H, W, 3) in [0, 1] but persist as 8-bit PNG, so
pipeline frames are quantized to the PNG grid the moment they are produced;
that keeps every on-disk artifact bit-reproducible. Depth maps use a small
self-describing flat binary: magic, dims, then row-major float64 values.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import CorruptDocument

DEPTH_MAGIC = b"SWDEPTH1"


def quantize(image: np.ndarray) -> np.ndarray:
    """Snap a float image to the 8-bit grid it will occupy on disk."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.rint(arr * 255.0) / 255.0


def save_png(path: str | Path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.rint(arr * 255.0).astype(np.uint8), mode="RGB").save(path, format="PNG")


def load_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def png_bytes(image: np.ndarray) -> bytes:
    import io

    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    buf = io.BytesIO()
    Image.fromarray(np.rint(arr * 255.0).astype(np.uint8), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def image_from_png_bytes(data: bytes) -> np.ndarray:
    import io

    with Image.open(io.BytesIO(data)) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_depth(path: str | Path, depth: np.ndarray) -> None:
    d = np.ascontiguousarray(depth, dtype="<f8")
    if d.ndim != 2:
        raise CorruptDocument(f"depth must be 2-D, got shape {d.shape}")
    h, w = d.shape
    header = DEPTH_MAGIC + np.array([h, w], dtype="<u4").tobytes()
    Path(path).write_bytes(header + d.tobytes())


def load_depth(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[: len(DEPTH_MAGIC)] != DEPTH_MAGIC:
        raise CorruptDocument(f"{path} is not a depth file")
    h, w = np.frombuffer(raw, dtype="<u4", count=2, offset=len(DEPTH_MAGIC))
    data = np.frombuffer(raw, dtype="<f8", offset=len(DEPTH_MAGIC) + 8)
    if data.size != int(h) * int(w):
        raise CorruptDocument(f"depth payload size mismatch in {path}")
    return data.reshape(int(h), int(w)).copy()
