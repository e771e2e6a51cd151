"""Concept-relation customization: losses, prior samples, and the trainers.

The construction trainer runs in two phases over a single scene image: phase
one updates only the handle embeddings (textual-inversion style), phase two
fine-tunes the denoiser weights (and, by default, keeps co-training the
embeddings). Each step draws one relation edge, one timestep, and fresh
noise, and optimizes

    L_total = L_rec + lambda_prior * L_prior + lambda_attn * L_attn,

with L_rec applied to original-image samples, L_prior to outpainted prior
samples, and the attention term to both. The refinement trainer is the
test-time variant: one edge, one short phase, no prior term, and only the
edge's own handles join the weights as trainable.

All losses reduce by the mean over every tensor element, so an all-ones mask
makes L_rec equal L_prior exactly and complementary masks add up to it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from . import graph as sg
from . import masks as mk
from .diffusion import EmbeddingTable, LatentCodec, ToyDenoiser, add_noise
from .errors import (
    DivergedLoss,
    EmptyGraph,
    MissingMap,
    MissingMask,
    OutpaintFailure,
    SceneWalkError,
    ShapeMismatch,
)
from .outpaint import OutpaintRequest, Outpainter, to_outpainter

LogSink = Callable[[dict], None]


@dataclass(frozen=True)
class LossWeights:
    lambda_prior: float = 1.0
    lambda_attn: float = 0.01

    def __post_init__(self):
        if self.lambda_prior < 0 or self.lambda_attn < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class TrainConfig:
    phase1_steps: int = 400
    phase1_lr: float = 1e-6
    phase2_steps: int = 400
    phase2_lr: float = 1e-4
    refine_steps: int = 50
    refine_lr: float = 1e-4
    batch_size: int = 1
    seed: int = 0
    prior_count: int = 4
    prior_steps: int = 10          # sampler steps when generating prior samples
    optimizer: str = "sgd"         # "sgd" | "adam"
    phase2_train_embeddings: bool = True
    loss_split: str = "by_origin"  # "by_origin" | "joint"

    def __post_init__(self):
        if min(self.phase1_steps, self.phase2_steps, self.refine_steps) < 0:
            raise ValueError("step counts must be nonnegative")
        if min(self.phase1_lr, self.phase2_lr, self.refine_lr) <= 0:
            raise ValueError("learning rates must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss_split not in ("by_origin", "joint"):
            raise ValueError(f"unknown loss split {self.loss_split!r}")


@dataclass(frozen=True)
class TrainingSample:
    latent: torch.Tensor                     # (3, h, w) clean latent
    tokens: tuple[str, str, str]
    union_mask: torch.Tensor                 # (h, w) {0,1} float64
    handle_masks: dict                       # token -> (h, w) {0,1} float64
    origin: str                              # "original" | "prior"
    edge_id: str = ""


# --- losses ---


def loss_rec(eps: torch.Tensor, eps_hat: torch.Tensor, m_u: torch.Tensor) -> torch.Tensor:
    """Masked reconstruction loss: mean over all elements of ((eps - eps_hat) * m)^2."""
    if eps.shape != eps_hat.shape:
        raise ShapeMismatch(f"eps {tuple(eps.shape)} != eps_hat {tuple(eps_hat.shape)}")
    if m_u.shape != eps.shape[-2:]:
        raise ShapeMismatch(f"mask {tuple(m_u.shape)} does not match latent {tuple(eps.shape)}")
    return (((eps - eps_hat) * m_u) ** 2).mean()


def loss_prior(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    """Unmasked mean squared noise residual."""
    if eps.shape != eps_hat.shape:
        raise ShapeMismatch(f"eps {tuple(eps.shape)} != eps_hat {tuple(eps_hat.shape)}")
    return ((eps - eps_hat) ** 2).mean()


def attention_target(mask_latent: torch.Tensor) -> torch.Tensor:
    """Resample a latent-resolution binary mask to attention resolution by area averaging."""
    h, w = mask_latent.shape
    if h % 2 or w % 2:
        raise ShapeMismatch(f"latent mask shape {(h, w)} must be even")
    return mask_latent.reshape(h // 2, 2, w // 2, 2).mean(dim=(1, 3))


def loss_attn(
    attention_maps: torch.Tensor,
    handles: Sequence[str],
    handle_masks: dict,
) -> torch.Tensor:
    """Mean over handles of the mean squared map-vs-mask difference."""
    if attention_maps.shape[0] != len(handles):
        raise MissingMap(
            f"{attention_maps.shape[0]} maps for {len(handles)} handles"
        )
    if len(handles) == 0:
        return torch.zeros((), dtype=torch.float64)
    terms = []
    for pos, handle in enumerate(handles):
        if handle not in handle_masks:
            raise MissingMask(f"no mask for handle {handle!r}")
        target = attention_target(handle_masks[handle])
        if target.shape != attention_maps.shape[1:]:
            raise ShapeMismatch(
                f"mask target {tuple(target.shape)} != map {tuple(attention_maps.shape[1:])}"
            )
        terms.append(((attention_maps[pos] - target) ** 2).mean())
    return torch.stack(terms).mean()


def loss_total(
    sample: TrainingSample,
    model: ToyDenoiser,
    table: EmbeddingTable,
    t: int,
    eps: torch.Tensor,
    weights: LossWeights,
    loss_split: str = "by_origin",
) -> tuple[torch.Tensor, dict]:
    """Combined loss for one sample at one timestep; returns (total, components).

    With the default by-origin split, original samples contribute the masked
    reconstruction term and prior samples the prior term; the attention term
    applies to both. The joint split applies all three terms to every sample.
    """
    prompt = torch.stack([table.get(tok) for tok in sample.tokens])
    z_t = add_noise(model.schedule, sample.latent, t, eps)
    out = model(z_t, t, prompt)
    rec = loss_rec(eps, out.eps_hat, sample.union_mask)
    prior = loss_prior(eps, out.eps_hat)
    attn = loss_attn(out.attention_maps, sample.tokens, sample.handle_masks)
    if loss_split == "joint":
        total = rec + weights.lambda_prior * prior + weights.lambda_attn * attn
    elif sample.origin == "prior":
        total = weights.lambda_prior * prior + weights.lambda_attn * attn
    else:
        total = rec + weights.lambda_attn * attn
    return total, {
        "loss_rec": float(rec.detach()),
        "loss_prior": float(prior.detach()),
        "loss_attn": float(attn.detach()),
        "loss_total": float(total.detach()),
    }


# --- sample assembly ---


def latent_mask(mask_px: np.ndarray, codec: LatentCodec) -> torch.Tensor:
    """Binarized latent-resolution version of a pixel mask."""
    cov = mk.area_downsample(mask_px, codec.factor)
    return torch.from_numpy(mk.binarize(cov).astype(np.float64))


def build_edge_sample(
    graph: sg.SceneConceptGraph,
    edge_id: str,
    image: np.ndarray,
    codec: LatentCodec,
    origin: str = "original",
    latent: Optional[torch.Tensor] = None,
) -> TrainingSample:
    """Original-image training sample for one relation edge's prompt triple."""
    triple = sg.prompt_triple(graph, edge_id)
    tok_a, tok_r, tok_b = triple.tokens
    m_a = latent_mask(triple.handle_masks[tok_a], codec)
    m_b = latent_mask(triple.handle_masks[tok_b], codec)
    m_u = torch.maximum(m_a, m_b)
    return TrainingSample(
        latent=codec.encode(image) if latent is None else latent,
        tokens=triple.tokens,
        union_mask=m_u,
        handle_masks={tok_a: m_a, tok_r: m_u, tok_b: m_b},
        origin=origin,
        edge_id=edge_id,
    )


def make_prior_samples(
    graph: sg.SceneConceptGraph,
    edge_id: str,
    outpainter: Outpainter,
    count: int,
    seed: int,
    reference_image: np.ndarray,
    sampler_steps: int = 10,
) -> list[TrainingSample]:
    """Outpaint around the edge's concepts to get prior-preservation samples.

    The region inside the union mask stays pixel-identical to the reference;
    everything outside is regenerated, deterministically per seed.
    """
    if count == 0:
        return []
    base = build_edge_sample(graph, edge_id, reference_image, outpainter.codec)
    f = outpainter.codec.factor
    keep_px = mk.nearest_upsample(base.union_mask.numpy().astype(np.uint8), f)
    fill = mk.as_mask(1 - keep_px)
    samples = []
    for k in range(count):
        if not fill.any():
            out_img = np.asarray(reference_image, dtype=np.float64)
        else:
            try:
                out_img = outpainter(
                    OutpaintRequest(
                        partial_image=reference_image,
                        fill_mask=fill,
                        prompt_tokens=base.tokens,
                        seed=seed + k,
                        steps=sampler_steps,
                    )
                )
            except SceneWalkError as exc:
                raise OutpaintFailure(f"prior sample {k} failed: {exc}") from exc
        samples.append(replace(base, latent=outpainter.codec.encode(out_img), origin="prior"))
    return samples


# --- optimizers ---


class _Sgd:
    def __init__(self, params: list[torch.Tensor], lr: float):
        self.params = params
        self.lr = lr

    def step(self, grads: Sequence[Optional[torch.Tensor]]) -> None:
        with torch.no_grad():
            for p, g in zip(self.params, grads):
                if g is not None:
                    p -= self.lr * g


class _Adam:
    def __init__(self, params: list[torch.Tensor], lr: float, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [torch.zeros_like(p) for p in params]
        self.v = [torch.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: Sequence[Optional[torch.Tensor]]) -> None:
        self.t += 1
        with torch.no_grad():
            for i, (p, g) in enumerate(zip(self.params, grads)):
                if g is None:
                    continue
                self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
                self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
                mh = self.m[i] / (1 - self.b1 ** self.t)
                vh = self.v[i] / (1 - self.b2 ** self.t)
                p -= self.lr * mh / (vh.sqrt() + self.eps)


def _make_optimizer(kind: str, params: list[torch.Tensor], lr: float):
    return _Adam(params, lr) if kind == "adam" else _Sgd(params, lr)


# --- trainers ---


def ensure_handle_embeddings(table: EmbeddingTable, graph: sg.SceneConceptGraph) -> None:
    """Register any missing node/edge handles as trainable entries."""
    for node in graph.nodes:
        table.add(node.handle, trainable=True)
    for edge in graph.edges:
        table.add(edge.handle, trainable=True)


def _run_steps(
    model: ToyDenoiser,
    table: EmbeddingTable,
    samples_by_edge: dict,
    edge_ids: list[str],
    trainable_tokens: list[str],
    train_weights: bool,
    steps: int,
    lr: float,
    config: TrainConfig,
    weights: LossWeights,
    gen: torch.Generator,
    phase: str,
    log: Optional[LogSink],
) -> None:
    """Shared SGD loop; mutates model/table in place (callers pass clones)."""
    emb_params = []
    for tok in trainable_tokens:
        p = table.vectors[tok].clone().requires_grad_(True)
        table.vectors[tok] = p
        emb_params.append(p)
    weight_params = list(model.parameters()) if train_weights else []
    params = weight_params + emb_params
    if not params or steps == 0:
        _detach_table(table)
        return
    opt = _make_optimizer(config.optimizer, params, lr)

    for step in range(steps):
        edge_id = edge_ids[int(torch.randint(len(edge_ids), (1,), generator=gen))]
        originals, priors = samples_by_edge[edge_id]
        use_prior = priors and (step % 2 == 1)
        sample = priors[step // 2 % len(priors)] if use_prior else originals[0]
        t = int(torch.randint(1, model.schedule.T + 1, (1,), generator=gen))
        eps = torch.randn(sample.latent.shape, generator=gen, dtype=torch.float64)
        total, parts = loss_total(sample, model, table, t, eps, weights, config.loss_split)
        if not math.isfinite(parts["loss_total"]):
            raise DivergedLoss(f"non-finite loss at {phase} step {step}")
        grads = torch.autograd.grad(total, params, allow_unused=True)
        opt.step(grads)
        if log is not None:
            log({"step": step, "phase": phase, "edge_id": edge_id, "t": t, **parts})
    _detach_table(table)


def _detach_table(table: EmbeddingTable) -> None:
    for tok in list(table.vectors):
        table.vectors[tok] = table.vectors[tok].detach()


def train_construction(
    graph: sg.SceneConceptGraph,
    image: np.ndarray,
    model: ToyDenoiser,
    table: EmbeddingTable,
    config: TrainConfig,
    weights: LossWeights = LossWeights(),
    codec: Optional[LatentCodec] = None,
    log: Optional[LogSink] = None,
) -> tuple[ToyDenoiser, EmbeddingTable]:
    """Two-phase scene customization over all relation edges.

    Phase 1 touches only handle embeddings; phase 2 fine-tunes the denoiser
    weights (plus embeddings unless disabled). Inputs are never mutated.
    """
    if len(graph.edges) == 0:
        raise EmptyGraph("graph has no relation edges to train on")
    codec = codec or LatentCodec()
    model = model.clone()
    table = table.clone()
    ensure_handle_embeddings(table, graph)

    prior_painter = to_outpainter(model, table, codec=codec)
    samples_by_edge = {}
    for i, edge in enumerate(graph.edges):
        originals = [build_edge_sample(graph, edge.id, image, codec)]
        priors = make_prior_samples(
            graph,
            edge.id,
            prior_painter,
            config.prior_count,
            seed=config.seed + 1000 * i,
            reference_image=image,
            sampler_steps=config.prior_steps,
        )
        samples_by_edge[edge.id] = (originals, priors)
    edge_ids = [e.id for e in graph.edges]
    handle_tokens = [n.handle for n in graph.nodes] + [e.handle for e in graph.edges]

    gen = torch.Generator().manual_seed(config.seed)
    _run_steps(
        model, table, samples_by_edge, edge_ids,
        trainable_tokens=handle_tokens, train_weights=False,
        steps=config.phase1_steps, lr=config.phase1_lr,
        config=config, weights=weights, gen=gen, phase="phase1", log=log,
    )
    gen2 = torch.Generator().manual_seed(config.seed + 1)
    _run_steps(
        model, table, samples_by_edge, edge_ids,
        trainable_tokens=handle_tokens if config.phase2_train_embeddings else [],
        train_weights=True,
        steps=config.phase2_steps, lr=config.phase2_lr,
        config=config, weights=weights, gen=gen2, phase="phase2", log=log,
    )
    return model, table


def train_refine(
    graph: sg.SceneConceptGraph,
    affected_edge_id: str,
    new_frame_image: np.ndarray,
    model: ToyDenoiser,
    table: EmbeddingTable,
    config: TrainConfig,
    weights: LossWeights = LossWeights(),
    codec: Optional[LatentCodec] = None,
    log: Optional[LogSink] = None,
) -> tuple[ToyDenoiser, EmbeddingTable]:
    """Single-edge test-time training on a freshly generated frame.

    Trains the denoiser weights jointly with the affected edge's own handle
    embeddings (the relation token and its non-level-1 endpoint); every other
    embedding stays bit-identical. No prior term.
    """
    codec = codec or LatentCodec()
    model = model.clone()
    table = table.clone()
    edge = graph.edge(affected_edge_id)
    triple = sg.prompt_triple(graph, affected_edge_id)  # raises MutedEndpoint
    level1 = graph.level_one()
    trainable = [
        tok
        for tok, node_id in zip(
            (triple.tokens[0], triple.tokens[2]), edge.endpoints
        )
        if node_id != level1.id
    ] + [edge.handle]
    for tok in triple.tokens:
        table.add(tok, trainable=tok in trainable)

    sample = build_edge_sample(graph, affected_edge_id, new_frame_image, codec)
    refine_weights = LossWeights(lambda_prior=0.0, lambda_attn=weights.lambda_attn)
    gen = torch.Generator().manual_seed(config.seed + 2)
    _run_steps(
        model, table, {affected_edge_id: ([sample], [])}, [affected_edge_id],
        trainable_tokens=trainable, train_weights=True,
        steps=config.refine_steps, lr=config.refine_lr,
        config=config, weights=refine_weights, gen=gen, phase="refine", log=log,
    )
    return model, table
