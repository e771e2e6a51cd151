"""Binary raster mask utilities: run-length coding and resolution changes.

Masks are uint8 arrays of shape (H, W) with values in {0, 1}. The run-length
string format used by the graph document schema is a space-separated list of
run lengths over the row-major flattened mask, alternating value 0 and 1 and
always starting with the length of the leading zero-run (which may be 0).
"""

from __future__ import annotations

import numpy as np

from .errors import CorruptMask

BINARIZE_THRESHOLD = 0.5  # ties go to 1 ("generate")


def as_mask(arr: np.ndarray) -> np.ndarray:
    """Validate and normalize an array to a read-only {0,1} uint8 mask."""
    a = np.asarray(arr)
    if a.ndim != 2:
        raise CorruptMask(f"mask must be 2-D, got shape {a.shape}")
    if a.dtype != np.uint8:
        if not np.isin(a, (0, 1)).all():
            raise CorruptMask("mask values must be 0 or 1")
        a = a.astype(np.uint8)
    elif a.max(initial=0) > 1:
        raise CorruptMask("mask values must be 0 or 1")
    a = a.copy()
    a.flags.writeable = False
    return a


def rle_encode(mask: np.ndarray) -> str:
    """Encode a {0,1} mask to the run-length string, row-major."""
    flat = np.asarray(mask, dtype=np.uint8).ravel()
    if flat.size == 0:
        return ""
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0] == 1:
        runs = [0] + runs
    return " ".join(str(r) for r in runs)


def rle_decode(rle: str, shape: tuple[int, int]) -> np.ndarray:
    """Decode a run-length string back to a mask of the given (H, W) shape."""
    h, w = shape
    total = h * w
    if rle.strip() == "":
        if total != 0:
            raise CorruptMask("empty run-length string for nonempty mask")
        return as_mask(np.zeros(shape, dtype=np.uint8))
    try:
        runs = [int(tok) for tok in rle.split()]
    except ValueError as exc:
        raise CorruptMask(f"malformed run-length string: {exc}") from exc
    if any(r < 0 for r in runs):
        raise CorruptMask("negative run length")
    if sum(runs) != total:
        raise CorruptMask(f"run lengths sum to {sum(runs)}, expected {total}")
    flat = np.zeros(total, dtype=np.uint8)
    pos = 0
    value = 0
    for run in runs:
        if value:
            flat[pos : pos + run] = 1
        pos += run
        value ^= 1
    return as_mask(flat.reshape(shape))


def area_downsample(mask: np.ndarray, factor: int) -> np.ndarray:
    """Average-pool a raster by an integer factor. Returns float64 coverage."""
    a = np.asarray(mask, dtype=np.float64)
    h, w = a.shape
    if h % factor or w % factor:
        raise CorruptMask(f"shape {a.shape} not divisible by factor {factor}")
    return a.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


def binarize(coverage: np.ndarray, threshold: float = BINARIZE_THRESHOLD) -> np.ndarray:
    """Threshold a coverage raster; values exactly at the threshold map to 1."""
    return as_mask((np.asarray(coverage) >= threshold).astype(np.uint8))


def nearest_upsample(raster: np.ndarray, factor: int) -> np.ndarray:
    """Repeat each cell of a 2-D raster into a factor x factor block."""
    return np.repeat(np.repeat(raster, factor, axis=0), factor, axis=1)
