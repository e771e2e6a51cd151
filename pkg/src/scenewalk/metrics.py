"""Scene-fidelity metric: embedding similarity of generated frames to frame 0."""

from __future__ import annotations

import numpy as np

from .backends import EmbeddingBackend
from .errors import EmptySet, ShapeMismatch


def _checked_embedding(backend: EmbeddingBackend, image: np.ndarray) -> np.ndarray:
    vec = np.asarray(backend.embed(image), dtype=np.float64)
    if vec.ndim != 1:
        raise ShapeMismatch(f"embedding must be a vector, got shape {vec.shape}")
    norm = np.linalg.norm(vec)
    if abs(norm - 1.0) > 1e-6:
        raise ShapeMismatch(f"embedding norm {norm} is not 1 within 1e-6")
    return vec


def per_image_similarities(
    initial: np.ndarray, generated: list[np.ndarray], backend: EmbeddingBackend
) -> list[float]:
    if len(generated) == 0:
        raise EmptySet("no generated images to score")
    ref = _checked_embedding(backend, initial)
    return [float(ref @ _checked_embedding(backend, img)) for img in generated]


def scene_fidelity(
    initial: np.ndarray,
    generated: list[np.ndarray],
    backend: EmbeddingBackend,
    mode: str = "initial_vs_each",
) -> float:
    """Mean cosine similarity between frame 0 and each generated frame.

    mode="all_pairs" instead averages over every unordered pair drawn from
    {initial} + generated (flagged alternative reading).
    """
    if mode == "initial_vs_each":
        return float(np.mean(per_image_similarities(initial, generated, backend)))
    if mode == "all_pairs":
        if len(generated) == 0:
            raise EmptySet("no generated images to score")
        vecs = [_checked_embedding(backend, img) for img in [initial] + list(generated)]
        sims = [vecs[i] @ vecs[j] for i in range(len(vecs)) for j in range(i + 1, len(vecs))]
        return float(np.mean(sims))
    raise ValueError(f"unknown mode {mode!r}")


def fidelity_report(
    initial: np.ndarray, generated: list[np.ndarray], backend: EmbeddingBackend
) -> dict:
    per_image = per_image_similarities(initial, generated, backend)
    return {
        "metric": float(np.mean(per_image)),
        "per_image": per_image,
        "backend_id": backend.backend_id,
    }
