"""Pluggable depth / segmentation / image-embedding backends with toy built-ins.

Real estimators sit behind these protocols; the toy implementations are
deterministic and content-light so the pipeline stays desk-scale testable.
"""

from __future__ import annotations

from typing import Optional, Protocol

import numpy as np
from scipy import ndimage

from . import masks as mk


class DepthBackend(Protocol):
    backend_id: str

    def depth(self, image: np.ndarray) -> np.ndarray: ...


class SegmenterBackend(Protocol):
    backend_id: str

    def segment(
        self, image: np.ndarray, description: str, mask_hint: Optional[np.ndarray] = None
    ) -> np.ndarray: ...


class EmbeddingBackend(Protocol):
    backend_id: str

    def embed(self, image: np.ndarray) -> np.ndarray: ...


class RampDepth:
    """Row ramp: depth grows toward the top of the image, ignores content."""

    backend_id = "ramp"

    def __init__(self, near: float = 1.0, far: float = 3.0):
        self.near = near
        self.far = far

    def depth(self, image: np.ndarray) -> np.ndarray:
        h, w = image.shape[:2]
        rows = np.arange(h, dtype=np.float64)
        ramp = self.far - (self.far - self.near) * rows / max(h - 1, 1)
        return np.repeat(ramp[:, None], w, axis=1)


class BrightRegionSegmenter:
    """Connected bright-region thresholding around the hint or image center."""

    backend_id = "bright"

    def segment(
        self, image: np.ndarray, description: str, mask_hint: Optional[np.ndarray] = None
    ) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64)
        lum = img.mean(axis=2)
        bright = lum > lum.mean()
        labels, count = ndimage.label(bright)
        h, w = lum.shape
        if count == 0:
            return np.zeros((h, w), dtype=np.uint8)
        if mask_hint is not None and np.asarray(mask_hint).any():
            hint = np.asarray(mask_hint).astype(bool)
            overlaps = ndimage.sum_labels(hint, labels, index=range(1, count + 1))
            pick = int(np.argmax(overlaps)) + 1
            if overlaps.max() == 0:
                pick = _component_near(labels, count, h // 2, w // 2)
        else:
            pick = _component_near(labels, count, h // 2, w // 2)
        return mk.as_mask((labels == pick).astype(np.uint8))


def _component_near(labels: np.ndarray, count: int, row: int, col: int) -> int:
    if labels[row, col] > 0:
        return int(labels[row, col])
    centers = ndimage.center_of_mass(labels > 0, labels, index=range(1, count + 1))
    dists = [(r - row) ** 2 + (c - col) ** 2 for r, c in centers]
    return int(np.argmin(dists)) + 1


class ToyEmbedder:
    """Unit-norm embedding from a coarse downsample of the image."""

    backend_id = "toy"

    def embed(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64)
        h, w = img.shape[:2]
        gh, gw = min(4, h), min(4, w)
        cells = np.zeros((gh, gw, 3))
        for i in range(gh):
            for j in range(gw):
                cells[i, j] = img[
                    i * h // gh : (i + 1) * h // gh, j * w // gw : (j + 1) * w // gw
                ].mean(axis=(0, 1))
        vec = cells.ravel() + 1e-3  # keep the all-black image off the origin
        return vec / np.linalg.norm(vec)


class ConstantEmbedder:
    """Maps every image to the same unit vector; for tests."""

    backend_id = "constant"

    def __init__(self, dim: int = 8):
        v = np.ones(dim)
        self.vector = v / np.linalg.norm(v)

    def embed(self, image: np.ndarray) -> np.ndarray:
        return self.vector.copy()


_DEPTH = {"ramp": RampDepth}
_SEGMENT = {"bright": BrightRegionSegmenter}
_EMBED = {"toy": ToyEmbedder, "constant": ConstantEmbedder}


def get_depth_backend(name: str) -> DepthBackend:
    return _requested(_DEPTH, name, "depth")()


def get_segmenter(name: str) -> SegmenterBackend:
    return _requested(_SEGMENT, name, "segmenter")()


def get_embedder(name: str) -> EmbeddingBackend:
    return _requested(_EMBED, name, "embedder")()


def _requested(registry: dict, name: str, kind: str):
    if name not in registry:
        raise KeyError(f"unknown {kind} backend {name!r}; have {sorted(registry)}")
    return registry[name]
