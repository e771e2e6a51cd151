"""Pinhole cameras, point-cloud accumulation, and z-buffer view synthesis.

World-to-camera extrinsics; pixel (row v, col u) has its center at image
coordinates (u, v). Rendering splats each point into its nearest pixel and
keeps the closest depth, so unproject followed by render at the same camera
reproduces the source image bit-exactly with an empty fill mask.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import EmptyScene, MaskSizeMismatch, NonPositiveDepth, ShapeMismatch

logger = logging.getLogger(__name__)

Z_NEAR = 1e-4


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray      # (3, 3) world-to-camera
    translation: np.ndarray   # (3,)
    size: tuple[int, int]     # (H, W)

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ShapeMismatch("camera pose must be a 3x3 rotation and a 3-vector")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9:
            raise ShapeMismatch("camera rotation is not orthonormal")
        if self.fx <= 0 or self.fy <= 0:
            raise ShapeMismatch("focal lengths must be positive")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def view_dir(self) -> np.ndarray:
        return self.rotation.T @ np.array([0.0, 0.0, 1.0])

    @property
    def right_dir(self) -> np.ndarray:
        return self.rotation.T @ np.array([1.0, 0.0, 0.0])

    @property
    def down_dir(self) -> np.ndarray:
        return self.rotation.T @ np.array([0.0, 1.0, 0.0])

    @staticmethod
    def default(size: tuple[int, int]) -> "Camera":
        h, w = size
        return Camera(
            fx=float(w),
            fy=float(w),
            cx=(w - 1) / 2.0,
            cy=(h - 1) / 2.0,
            rotation=np.eye(3),
            translation=np.zeros(3),
            size=(h, w),
        )

    def to_document(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "size": list(self.size),
        }

    @staticmethod
    def from_document(doc: dict) -> "Camera":
        return Camera(
            fx=doc["fx"], fy=doc["fy"], cx=doc["cx"], cy=doc["cy"],
            rotation=np.array(doc["rotation"], dtype=np.float64),
            translation=np.array(doc["translation"], dtype=np.float64),
            size=(doc["size"][0], doc["size"][1]),
        )


def check_depth(depth: np.ndarray) -> np.ndarray:
    d = np.asarray(depth, dtype=np.float64)
    if not np.isfinite(d).all() or (d <= 0).any():
        raise NonPositiveDepth("depth map must be positive and finite")
    return d


@dataclass(frozen=True)
class PointCloudScene:
    positions: np.ndarray     # (N, 3) world frame
    colors: np.ndarray        # (N, 3) in [0, 1]
    frame_index: np.ndarray   # (N,) source frame

    @staticmethod
    def empty() -> "PointCloudScene":
        return PointCloudScene(
            positions=np.zeros((0, 3)), colors=np.zeros((0, 3)), frame_index=np.zeros(0, dtype=np.int64)
        )

    def __len__(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class RenderResult:
    partial_image: np.ndarray   # (H, W, 3), holes are 0
    fill_mask: np.ndarray       # (H, W) uint8, 1 = no coverage
    rendered_depth: np.ndarray  # (H, W), defined where fill_mask = 0, else 0


def unproject(
    image: np.ndarray,
    depth: np.ndarray,
    camera: Camera,
    frame_index: int = 0,
    select: Optional[np.ndarray] = None,
) -> PointCloudScene:
    """Lift pixels to world-frame colored points through the camera rays.

    ``select`` optionally restricts to a {0,1} pixel subset.
    """
    img = np.asarray(image, dtype=np.float64)
    d = check_depth(depth)
    h, w = camera.size
    if img.shape[:2] != (h, w) or d.shape != (h, w):
        raise MaskSizeMismatch(f"image {img.shape} / depth {d.shape} do not match camera size {(h, w)}")
    vs, us = np.mgrid[0:h, 0:w]
    if select is not None:
        pick = np.asarray(select).astype(bool)
        if pick.shape != (h, w):
            raise MaskSizeMismatch("selection mask size mismatch")
    else:
        pick = np.ones((h, w), dtype=bool)
    us, vs, d_sel = us[pick], vs[pick], d[pick]
    x = (us - camera.cx) / camera.fx * d_sel
    y = (vs - camera.cy) / camera.fy * d_sel
    p_cam = np.stack([x, y, d_sel], axis=1)
    p_world = (p_cam - camera.translation) @ camera.rotation
    return PointCloudScene(
        positions=p_world,
        colors=img[pick].reshape(-1, 3).copy(),
        frame_index=np.full(len(p_world), frame_index, dtype=np.int64),
    )


def merge(scene: PointCloudScene, points: PointCloudScene) -> PointCloudScene:
    """Concatenate point sets; no deduplication, inputs unmutated."""
    return PointCloudScene(
        positions=np.concatenate([scene.positions, points.positions]),
        colors=np.concatenate([scene.colors, points.colors]),
        frame_index=np.concatenate([scene.frame_index, points.frame_index]),
    )


def render(
    scene: PointCloudScene,
    camera: Camera,
    z_near: float = Z_NEAR,
    splat_radius: int = 1,
) -> RenderResult:
    """Z-buffer splat of the scene into the camera; nearest point per pixel.

    splat_radius = 1 hits only the nearest pixel (exact round trips); larger
    radii cover the (2r - 1)-wide square around it, trading holes for blur.
    Depth ties break deterministically toward the earlier point (insertion
    order subsumes source frame order).
    """
    if len(scene) == 0:
        raise EmptyScene("cannot render an empty scene")
    if splat_radius < 1:
        raise ShapeMismatch("splat radius must be at least 1 pixel")
    h, w = camera.size
    p_cam = scene.positions @ camera.rotation.T + camera.translation
    z = p_cam[:, 2]
    in_front = z > z_near
    u0 = np.rint(camera.fx * p_cam[:, 0] / np.where(in_front, z, 1.0) + camera.cx).astype(np.int64)
    v0 = np.rint(camera.fy * p_cam[:, 1] / np.where(in_front, z, 1.0) + camera.cy).astype(np.int64)

    image = np.zeros((h, w, 3))
    depth = np.zeros((h, w))
    mask = np.ones((h, w), dtype=np.uint8)
    span = range(-(splat_radius - 1), splat_radius)
    pix_all, idx_all = [], []
    for dv in span:
        for du in span:
            u, v = u0 + du, v0 + dv
            visible = in_front & (u >= 0) & (u < w) & (v >= 0) & (v < h)
            idx = np.flatnonzero(visible)
            pix_all.append(v[idx] * w + u[idx])
            idx_all.append(idx)
    pix = np.concatenate(pix_all)
    idx = np.concatenate(idx_all)
    if idx.size:
        order = np.lexsort((idx, z[idx]))  # by depth, then insertion order
        pix_sorted = pix[order]
        first = np.unique(pix_sorted, return_index=True)[1]
        winners = idx[order[first]]
        pw = pix_sorted[first]
        image.reshape(-1, 3)[pw] = scene.colors[winners]
        depth.reshape(-1)[pw] = z[winners]
        mask.reshape(-1)[pw] = 0
    return RenderResult(partial_image=image, fill_mask=mask, rendered_depth=depth)


def align_depth(
    estimated_depth: np.ndarray,
    render_result: RenderResult,
    z_near: float = Z_NEAR,
) -> np.ndarray:
    """Least-squares scale/shift fit of estimated depth onto rendered depth.

    Fitted over covered pixels only; degenerate fits (fewer than two distinct
    estimates) fall back to the identity and are logged, never raised.
    """
    d_est = check_depth(estimated_depth)
    known = render_result.fill_mask == 0
    x = d_est[known]
    y = render_result.rendered_depth[known]
    if x.size < 2 or np.ptp(x) == 0.0:
        logger.warning("degenerate depth fit (%d known pixels); keeping estimate", x.size)
        s, b = 1.0, 0.0
    else:
        A = np.stack([x, np.ones_like(x)], axis=1)
        (s, b), *_ = np.linalg.lstsq(A, y, rcond=None)
        if not (np.isfinite(s) and np.isfinite(b)) or s <= 0:
            logger.warning("unstable depth fit (s=%g, b=%g); keeping estimate", s, b)
            s, b = 1.0, 0.0
    return np.maximum(s * d_est + b, 1.01 * z_near)


def _rotation_about(axis: np.ndarray, angle: float) -> np.ndarray:
    a = axis / np.linalg.norm(axis)
    kx = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * (kx @ kx)


def make_trajectory(
    kind: str,
    steps: int,
    step_size: float,
    start: Camera,
    orbit_radius: float = 1.0,
) -> list[Camera]:
    """[start] plus ``steps`` rigid follow-up poses.

    recede: move against the view axis by step_size per step.
    translate: move along the camera right axis.
    orbit: revolve about the look-at point (step_size in radians per step);
    angles accumulate absolutely so a full revolution returns to the start.
    """
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    cameras = [start]
    c0 = start.center
    if kind == "recede":
        for k in range(1, steps + 1):
            c = c0 - k * step_size * start.view_dir
            cameras.append(_reposed(start, start.rotation, c))
    elif kind == "translate":
        for k in range(1, steps + 1):
            c = c0 + k * step_size * start.right_dir
            cameras.append(_reposed(start, start.rotation, c))
    elif kind == "orbit":
        look_at = c0 + orbit_radius * start.view_dir
        axis = -start.down_dir
        for k in range(1, steps + 1):
            q = _rotation_about(axis, k * step_size)
            c = look_at + q @ (c0 - look_at)
            cameras.append(_reposed(start, start.rotation @ q.T, c))
    else:
        raise ValueError(f"unknown trajectory kind {kind!r}")
    return cameras


def _reposed(base: Camera, rotation: np.ndarray, center: np.ndarray) -> Camera:
    return Camera(
        fx=base.fx, fy=base.fy, cx=base.cx, cy=base.cy,
        rotation=rotation,
        translation=-rotation @ center,
        size=base.size,
    )


def export_xyzrgb(scene: PointCloudScene) -> str:
    """ASCII x y z r g b lines with a minimal comment header."""
    lines = [f"# xyzrgb {len(scene)}"]
    for p, c in zip(scene.positions, scene.colors):
        lines.append(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g} {c[0]:.17g} {c[1]:.17g} {c[2]:.17g}")
    return "\n".join(lines) + "\n"


def import_xyzrgb(text: str, frame_index: int = 0) -> PointCloudScene:
    positions, colors = [], []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = [float(v) for v in line.split()]
        positions.append(vals[:3])
        colors.append(vals[3:6])
    return PointCloudScene(
        positions=np.array(positions).reshape(-1, 3),
        colors=np.array(colors).reshape(-1, 3),
        frame_index=np.full(len(positions), frame_index, dtype=np.int64),
    )
