"""Denoising generative backend: schedule, embeddings, toy denoiser, sampler.

The toy denoiser is a small float64 convolutional network with one
cross-attention block over prompt tokens. It predicts noise through a fixed
signal/noise decomposition of the noisy latent,

    eps_hat = gate * z_t / sqrt(1 - abar_t) - sqrt(abar_t / (1 - abar_t)) * xhat,

where ``xhat`` is the network's clean-latent estimate: a learned canvas plus
a bounded conv + cross-attention detail path. With all weights zero the
output is exactly zero; at the default init it behaves as an ideal denoiser
for a flat gray scene, so short training runs only have to pull the canvas
toward the target image. Cross-attention maps are exposed per prompt token,
softmax-normalized over spatial positions and rescaled to [0, 1].

Everything here is deterministic given (weights, seed, inputs); sampling is
a DDIM-style reverse pass with an optional per-step latent hook.
"""

from __future__ import annotations

import base64
import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import (
    CorruptDocument,
    SchemaVersionMismatch,
    ShapeMismatch,
    TimestepOutOfRange,
    UnknownToken,
)

CHECKPOINT_VERSION = 1

# Per-step hook: receives (latent, next_timestep) after each reverse step and
# may return a replacement latent.
StepHook = Callable[[torch.Tensor, int], torch.Tensor]


class DenoiserBackend(Protocol):
    """Contract an external denoiser adapter must satisfy.

    Shapes and semantics match the toy implementation: float64 latents of
    ``latent_shape``, per-token attention maps in [0, 1] at
    ``attention_shape`` resolution. Adapters wrapping multi-block backbones
    must fold their cross-attention layers into one map per token and say
    how in ``attention_aggregation`` (e.g. "mean over mid-resolution
    blocks"); the toy backend has a single block.
    """

    schedule: NoiseSchedule
    latent_shape: tuple[int, int, int]
    attention_aggregation: str

    @property
    def attention_shape(self) -> tuple[int, int]: ...

    def __call__(self, z_t: torch.Tensor, t: int, prompt: torch.Tensor) -> "DenoiserOutput": ...


# --- noise schedule ---


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray           # (T,) per-step variances, beta_1 .. beta_T
    alpha_bars: np.ndarray      # (T + 1,) cumulative products, alpha_bars[0] = 1

    @property
    def T(self) -> int:
        return len(self.betas)

    @staticmethod
    def linear(T: int = 100, beta_start: float = 1e-4, beta_end: float = 2e-2) -> "NoiseSchedule":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
        alpha_bars = np.concatenate(([1.0], np.cumprod(1.0 - betas)))
        sched = NoiseSchedule(betas=betas, alpha_bars=alpha_bars)
        sched.validate()
        return sched

    def validate(self) -> None:
        b = self.betas
        if not (b[0] > 0 and b[-1] < 1 and (np.diff(b) >= 0).all()):
            raise CorruptDocument("betas must be nondecreasing in (0, 1)")
        ab = self.alpha_bars
        if ab[0] != 1.0 or not (np.diff(ab) < 0).all():
            raise CorruptDocument("alpha_bars must start at 1 and strictly decrease")

    def alpha_bar(self, t: int) -> float:
        if not 0 <= t <= self.T:
            raise TimestepOutOfRange(f"t={t} outside [0, {self.T}]")
        return float(self.alpha_bars[t])


def add_noise(schedule: NoiseSchedule, z0: torch.Tensor, t: int, eps: torch.Tensor) -> torch.Tensor:
    """Forward process: z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.

    t = 0 (abar = 1) is the identity and is accepted so reverse-process
    blending can land exactly on the clean latent.
    """
    if eps.shape != z0.shape:
        raise ShapeMismatch(f"eps shape {tuple(eps.shape)} != z0 shape {tuple(z0.shape)}")
    ab = schedule.alpha_bar(t)
    if t == 0:
        return z0.clone()
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


# --- embedding table ---


def _hash_vector(token: str, dim: int, scale: float = 0.1) -> torch.Tensor:
    seed = int.from_bytes(__import__("hashlib").sha256(token.encode()).digest()[:8], "little")
    gen = np.random.default_rng(seed)
    return torch.from_numpy(gen.normal(0.0, scale, size=dim))


class EmbeddingTable:
    """Token -> float64 vector store; handle entries are the trainable ones."""

    def __init__(self, dim: int = 8):
        self.dim = dim
        self.vectors: dict[str, torch.Tensor] = {}
        self.trainable: set[str] = set()

    def add(self, token: str, trainable: bool = False, vector: Optional[torch.Tensor] = None) -> None:
        if token in self.vectors:
            return
        vec = _hash_vector(token, self.dim) if vector is None else vector.to(torch.float64).clone()
        if vec.shape != (self.dim,):
            raise ShapeMismatch(f"vector for {token!r} has shape {tuple(vec.shape)}")
        self.vectors[token] = vec
        if trainable:
            self.trainable.add(token)

    def __contains__(self, token: str) -> bool:
        return token in self.vectors

    def get(self, token: str) -> torch.Tensor:
        if token not in self.vectors:
            raise UnknownToken(f"token {token!r} not in embedding table")
        return self.vectors[token]

    def clone(self) -> "EmbeddingTable":
        other = EmbeddingTable(self.dim)
        other.vectors = {k: v.clone() for k, v in self.vectors.items()}
        other.trainable = set(self.trainable)
        return other

    def equal(self, other: "EmbeddingTable") -> bool:
        return (
            self.dim == other.dim
            and self.trainable == other.trainable
            and self.vectors.keys() == other.vectors.keys()
            and all(torch.equal(self.vectors[k], other.vectors[k]) for k in self.vectors)
        )


def encode_prompt(table: EmbeddingTable, tokens: Sequence[str]) -> torch.Tensor:
    """Stack per-token vectors into an (n, d) prompt embedding."""
    if len(tokens) == 0:
        return torch.zeros((0, table.dim), dtype=torch.float64)
    return torch.stack([table.get(tok) for tok in tokens])


# --- latent codec ---


def _pairwise_block_mean(img: np.ndarray, f: int) -> np.ndarray:
    """Mean over f x f blocks with balanced pairwise sums.

    Linear accumulation rounds (3v is not representable for most v), so a
    naive mean over a constant block is off by an ulp; balanced pairs of a
    power-of-two count stay exact, which the codec round-trip relies on.
    """
    h, w = img.shape[0] // f, img.shape[1] // f
    a = img.reshape(h, f, w, f, 3)
    k = f
    while k > 1:
        a = a[:, 0:k:2] + a[:, 1:k:2]
        k //= 2
    k = f
    while k > 1:
        a = a[:, :, :, 0:k:2] + a[:, :, :, 1:k:2]
        k //= 2
    return a[:, 0, :, 0, :] / (f * f)


@dataclass(frozen=True)
class LatentCodec:
    """4x area-downsample encoder with nearest-neighbor decoder.

    Lossless at latent resolution: encode(decode(z)) == z bit-exact for z in
    [0, 1] because each decoded block is constant and block sizes are powers
    of two.
    """

    factor: int = 4

    def __post_init__(self):
        if self.factor < 1 or self.factor & (self.factor - 1):
            raise ShapeMismatch(f"codec factor {self.factor} must be a power of two")

    def latent_shape(self, image_shape: tuple[int, int]) -> tuple[int, int, int]:
        h, w = image_shape
        f = self.factor
        if h % f or w % f:
            raise ShapeMismatch(f"image size {(h, w)} not divisible by codec factor {f}")
        return (3, h // f, w // f)

    def encode(self, image: np.ndarray) -> torch.Tensor:
        img = np.asarray(image, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ShapeMismatch(f"expected (H, W, 3) image, got {img.shape}")
        self.latent_shape(img.shape[:2])
        z = _pairwise_block_mean(img, self.factor)
        return torch.from_numpy(np.ascontiguousarray(z.transpose(2, 0, 1)))

    def decode(self, z: torch.Tensor) -> np.ndarray:
        arr = z.detach().cpu().numpy().clip(0.0, 1.0)
        img = arr.transpose(1, 2, 0)
        return np.repeat(np.repeat(img, self.factor, axis=0), self.factor, axis=1)


# --- toy denoiser ---


def timestep_features(t: int, T: int) -> torch.Tensor:
    tau = t / T
    return torch.tensor(
        [tau, math.sin(2 * math.pi * tau), math.cos(2 * math.pi * tau), tau * tau],
        dtype=torch.float64,
    )


@dataclass(frozen=True)
class DenoiserOutput:
    eps_hat: torch.Tensor           # same shape as the input latent
    attention_maps: torch.Tensor    # (n_tokens, h_a, w_a), each in [0, 1]


class ToyDenoiser(nn.Module):
    """Conv net with one cross-attention block, sized to one latent shape."""

    def __init__(
        self,
        latent_shape: tuple[int, int, int],
        schedule: Optional[NoiseSchedule] = None,
        token_dim: int = 8,
        hidden: int = 8,
        attn_dim: int = 8,
        canvas_gain: float = 6.0,
        detail_scale: float = 0.25,
        init_seed: int = 0,
    ):
        super().__init__()
        c, h, w = latent_shape
        if c != 3 or h < 2 or w < 2 or h % 2 or w % 2:
            raise ShapeMismatch(f"latent shape {latent_shape} unsupported (need 3 x even x even)")
        self.latent_shape = (c, h, w)
        self.schedule = schedule or NoiseSchedule.linear()
        self.token_dim = token_dim
        self.hidden = hidden
        self.attn_dim = attn_dim
        self.canvas_gain = canvas_gain
        self.detail_scale = detail_scale
        self.init_seed = init_seed
        self.attention_aggregation = "single cross-attention block"

        self.conv_in = nn.Conv2d(c, hidden, 3, padding=1)
        self.t_proj = nn.Linear(4, hidden)
        self.to_q = nn.Linear(hidden, attn_dim)
        self.to_k = nn.Linear(token_dim, attn_dim)
        self.to_v = nn.Linear(token_dim, hidden)
        self.conv_out = nn.Conv2d(hidden, c, 3, padding=1)
        self.gate = nn.Parameter(torch.ones(c, dtype=torch.float64))
        self.canvas = nn.Parameter(torch.full((c, h, w), 0.5 / canvas_gain, dtype=torch.float64))
        self.to(torch.float64)
        self._reset_parameters()

    def _reset_parameters(self) -> None:
        gen = torch.Generator().manual_seed(self.init_seed)
        with torch.no_grad():
            for layer in (self.conv_in, self.t_proj, self.to_q, self.to_k, self.to_v, self.conv_out):
                layer.weight.copy_(torch.randn(layer.weight.shape, generator=gen, dtype=torch.float64) * 0.1)
                layer.bias.copy_(torch.randn(layer.bias.shape, generator=gen, dtype=torch.float64) * 0.02)

    @property
    def attention_shape(self) -> tuple[int, int]:
        _, h, w = self.latent_shape
        return (h // 2, w // 2)

    def forward(self, z_t: torch.Tensor, t: int, prompt: torch.Tensor) -> DenoiserOutput:
        if tuple(z_t.shape) != self.latent_shape:
            raise ShapeMismatch(f"latent shape {tuple(z_t.shape)} != {self.latent_shape}")
        if prompt.ndim != 2 or (prompt.shape[0] > 0 and prompt.shape[1] != self.token_dim):
            raise ShapeMismatch(f"prompt embedding shape {tuple(prompt.shape)} invalid")
        if not 1 <= t <= self.schedule.T:
            raise TimestepOutOfRange(f"t={t} outside [1, {self.schedule.T}]")

        ab = self.schedule.alpha_bar(t)
        c1 = 1.0 / math.sqrt(1.0 - ab)
        c2 = math.sqrt(ab / (1.0 - ab))
        ha, wa = self.attention_shape

        f = F.silu(self.conv_in(z_t.unsqueeze(0)) + self.t_proj(timestep_features(t, self.schedule.T))[None, :, None, None])
        fa = F.avg_pool2d(f, 2)                              # (1, H, ha, wa)
        flat = fa[0].permute(1, 2, 0).reshape(ha * wa, self.hidden)
        q = self.to_q(flat)                                  # (ha*wa, A)

        n_tokens = prompt.shape[0]
        if n_tokens > 0:
            k = self.to_k(prompt)                            # (n, A)
            v = self.to_v(prompt)                            # (n, H)
            scores = (q @ k.T) / math.sqrt(self.attn_dim)    # (ha*wa, n)
            ctx = torch.softmax(scores, dim=1) @ v           # (ha*wa, H)
            per_token = torch.softmax(scores, dim=0)         # softmax over positions
            maps = per_token / per_token.max(dim=0, keepdim=True).values
            maps = maps.T.reshape(n_tokens, ha, wa)
        else:
            ctx = torch.zeros_like(flat)
            maps = torch.zeros((0, ha, wa), dtype=torch.float64)

        ctx_img = ctx.reshape(ha, wa, self.hidden).permute(2, 0, 1).unsqueeze(0)
        g = f + F.interpolate(ctx_img, scale_factor=2, mode="nearest")
        detail = self.detail_scale * torch.tanh(self.conv_out(F.silu(g)))[0]
        xhat = self.canvas_gain * self.canvas + detail
        eps_hat = self.gate[:, None, None] * (c1 * z_t) - c2 * xhat
        return DenoiserOutput(eps_hat=eps_hat, attention_maps=maps)

    def predicted_clean(self, z_t: torch.Tensor, t: int, prompt: torch.Tensor) -> torch.Tensor:
        """x0 estimate implied by the eps prediction."""
        out = self(z_t, t, prompt)
        ab = self.schedule.alpha_bar(t)
        return (z_t - math.sqrt(1.0 - ab) * out.eps_hat) / math.sqrt(ab)

    def clone(self) -> "ToyDenoiser":
        return copy.deepcopy(self)

    def equal_weights(self, other: "ToyDenoiser") -> bool:
        mine = dict(self.named_parameters())
        theirs = dict(other.named_parameters())
        return mine.keys() == theirs.keys() and all(
            torch.equal(mine[k], theirs[k]) for k in mine
        )


def denoise(model: ToyDenoiser, z_t: torch.Tensor, t: int, prompt: torch.Tensor) -> DenoiserOutput:
    with torch.no_grad():
        return model(z_t, t, prompt)


# --- sampling ---


def sample(
    model: ToyDenoiser,
    shape: tuple[int, int, int],
    prompt: torch.Tensor,
    steps: int,
    seed: int,
    hook: Optional[StepHook] = None,
) -> torch.Tensor:
    """Deterministic DDIM reverse pass (eta = 0) from seeded Gaussian noise.

    The hook runs after every step and may replace the latent; steps = 0
    returns the initial noise draw.
    """
    sched = model.schedule
    if not 0 <= steps <= sched.T:
        raise TimestepOutOfRange(f"steps={steps} outside [0, {sched.T}]")
    if tuple(shape) != model.latent_shape:
        raise ShapeMismatch(f"shape {shape} != model latent shape {model.latent_shape}")
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(shape, generator=gen, dtype=torch.float64)
    if steps == 0:
        return z
    timesteps = [round(sched.T * k / steps) for k in range(steps, 0, -1)] + [0]
    with torch.no_grad():
        for t, t_next in zip(timesteps, timesteps[1:]):
            out = model(z, t, prompt)
            ab_t = sched.alpha_bar(t)
            ab_n = sched.alpha_bar(t_next)
            z0_pred = (z - math.sqrt(1.0 - ab_t) * out.eps_hat) / math.sqrt(ab_t)
            z = math.sqrt(ab_n) * z0_pred + math.sqrt(1.0 - ab_n) * out.eps_hat
            if hook is not None:
                z = hook(z, t_next)
    return z


# --- checkpoint io ---


def _encode_array(arr: np.ndarray) -> dict:
    a = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode_array(doc: dict) -> np.ndarray:
    raw = base64.b64decode(doc["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(doc["shape"]).copy()


def save_checkpoint(path: str | Path, model: ToyDenoiser, table: EmbeddingTable) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "schedule": {"betas": _encode_array(model.schedule.betas)},
        "model": {
            "latent_shape": list(model.latent_shape),
            "token_dim": model.token_dim,
            "hidden": model.hidden,
            "attn_dim": model.attn_dim,
            "canvas_gain": model.canvas_gain,
            "detail_scale": model.detail_scale,
            "init_seed": model.init_seed,
            "params": {
                name: _encode_array(p.detach().numpy()) for name, p in model.named_parameters()
            },
        },
        "table": {
            "dim": table.dim,
            "entries": [
                {
                    "token": tok,
                    "trainable": tok in table.trainable,
                    "vector": _encode_array(vec.numpy()),
                }
                for tok, vec in sorted(table.vectors.items())
            ],
        },
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> tuple[ToyDenoiser, EmbeddingTable]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptDocument(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("version") != CHECKPOINT_VERSION:
        raise SchemaVersionMismatch(f"checkpoint version {doc.get('version')!r}")
    betas = _decode_array(doc["schedule"]["betas"])
    schedule = NoiseSchedule(betas=betas, alpha_bars=np.concatenate(([1.0], np.cumprod(1.0 - betas))))
    m = doc["model"]
    model = ToyDenoiser(
        latent_shape=tuple(m["latent_shape"]),
        schedule=schedule,
        token_dim=m["token_dim"],
        hidden=m["hidden"],
        attn_dim=m["attn_dim"],
        canvas_gain=m["canvas_gain"],
        detail_scale=m["detail_scale"],
        init_seed=m["init_seed"],
    )
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(torch.from_numpy(_decode_array(m["params"][name])))
    table = EmbeddingTable(doc["table"]["dim"])
    for entry in doc["table"]["entries"]:
        table.add(
            entry["token"],
            trainable=entry["trainable"],
            vector=torch.from_numpy(_decode_array(entry["vector"])),
        )
    return model, table
