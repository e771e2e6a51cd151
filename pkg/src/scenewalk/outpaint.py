"""Mask-guided outpainting by blended latent denoising.

Converts a text-to-image model into an outpainter without touching weights:
at every reverse sampling step the latent is overwritten outside the fill
region with the appropriately re-noised encoding of the known pixels, using
one noise draw fixed per request. At the final step the schedule's
alpha_bar(0) = 1 makes the known region land exactly on the clean latent,
which is the anti-drift anchor the whole view-generation loop leans on.

Mask polarity everywhere: 1 = generate, 0 = known.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from . import masks as mk
from .diffusion import EmbeddingTable, LatentCodec, ToyDenoiser, add_noise, encode_prompt, sample
from .errors import AllUnknownWithoutPrompt, EmptyImage, ShapeMismatch

# offset so the fixed known-region noise never reuses the sampler's draw
_NOISE_SEED_OFFSET = 0x5EED0FF5


@dataclass(frozen=True)
class OutpaintRequest:
    partial_image: np.ndarray        # (H, W, 3) float in [0, 1]
    fill_mask: np.ndarray            # (H, W) {0,1}, 1 = generate
    prompt_tokens: tuple[str, ...]
    seed: int
    steps: int = 20


class Outpainter:
    """Stateless closure over live model weights; safe to share across calls."""

    def __init__(
        self,
        model: ToyDenoiser,
        table: EmbeddingTable,
        codec: Optional[LatentCodec] = None,
        pixel_composite: bool = True,
    ):
        self.model = model
        self.table = table
        self.codec = codec or LatentCodec()
        self.pixel_composite = pixel_composite

    def __call__(self, request: OutpaintRequest) -> np.ndarray:
        return outpaint(self, request)


def to_outpainter(
    model: ToyDenoiser,
    table: EmbeddingTable,
    codec: Optional[LatentCodec] = None,
    pixel_composite: bool = True,
) -> Outpainter:
    """Wrap a generation model as an outpainter; no weight changes."""
    return Outpainter(model, table, codec=codec, pixel_composite=pixel_composite)


def mask_to_latent(fill_mask: np.ndarray, latent_shape: tuple[int, ...]) -> torch.Tensor:
    """Resample a pixel fill mask to latent resolution.

    Area-average then binarize at 0.5 with ties going to "generate", so
    growing the pixel mask never shrinks the latent mask.
    """
    m = mk.as_mask(fill_mask)
    h_lat, w_lat = latent_shape[-2], latent_shape[-1]
    if m.shape[0] % h_lat or m.shape[1] % w_lat:
        raise ShapeMismatch(f"mask shape {m.shape} not a multiple of latent {latent_shape}")
    factor = m.shape[0] // h_lat
    if m.shape[1] // w_lat != factor:
        raise ShapeMismatch("anisotropic mask/latent scaling not supported")
    coverage = mk.area_downsample(m, factor)
    return torch.from_numpy(mk.binarize(coverage).astype(np.float64))


def outpaint(outpainter: Outpainter, request: OutpaintRequest) -> np.ndarray:
    """Generate the fill region, preserving known pixels within codec tolerance."""
    img = np.asarray(request.partial_image, dtype=np.float64)
    if img.size == 0:
        raise EmptyImage("partial image has no pixels")
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeMismatch(f"partial image must be (H, W, 3), got {img.shape}")
    fill = mk.as_mask(request.fill_mask)
    if fill.shape != img.shape[:2]:
        raise ShapeMismatch(f"fill mask {fill.shape} != image {img.shape[:2]}")
    if request.steps < 1:
        raise ShapeMismatch("outpaint needs at least one sampling step")
    if fill.all() and len(request.prompt_tokens) == 0:
        raise AllUnknownWithoutPrompt("nothing known and no prompt to guide generation")

    codec = outpainter.codec
    model = outpainter.model
    z_known = codec.encode(img)
    m_lat = mask_to_latent(fill, z_known.shape).bool().unsqueeze(0)
    eps_fixed = torch.randn(
        z_known.shape,
        generator=torch.Generator().manual_seed(request.seed + _NOISE_SEED_OFFSET),
        dtype=torch.float64,
    )
    prompt = encode_prompt(outpainter.table, list(request.prompt_tokens))

    def blend(z: torch.Tensor, t_next: int) -> torch.Tensor:
        known_traj = add_noise(model.schedule, z_known, t_next, eps_fixed)
        return torch.where(m_lat, z, known_traj)

    z = sample(model, model.latent_shape, prompt, request.steps, request.seed, hook=blend)
    out = codec.decode(z)
    if outpainter.pixel_composite and not fill.all():
        out = np.where(fill[:, :, None] == 1, out, img)
    return out
