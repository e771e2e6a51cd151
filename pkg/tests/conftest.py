import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def checker_image(h: int, w: int, block: int = 4) -> np.ndarray:
    """Smooth-ish deterministic RGB test image in [0, 1]."""
    ys, xs = np.mgrid[0:h, 0:w]
    r = 0.5 + 0.4 * np.sin(2 * np.pi * ys / h)
    g = 0.5 + 0.4 * np.cos(2 * np.pi * xs / w)
    b = 0.25 + 0.5 * (((ys // block) + (xs // block)) % 2)
    return np.clip(np.stack([r, g, b], axis=-1), 0.0, 1.0)


def half_mask(h: int, w: int, which: str = "left") -> np.ndarray:
    m = np.zeros((h, w), dtype=np.uint8)
    if which == "left":
        m[:, : w // 2] = 1
    elif which == "right":
        m[:, w // 2 :] = 1
    elif which == "top":
        m[: h // 2, :] = 1
    else:
        m[h // 2 :, :] = 1
    return m
