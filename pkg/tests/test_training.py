import numpy as np
import pytest
import torch

from scenewalk import diffusion as df
from scenewalk import graph as sg
from scenewalk import training as tr
from scenewalk.errors import DivergedLoss, EmptyGraph, MissingMap, MissingMask
from scenewalk.outpaint import to_outpainter

from conftest import checker_image, half_mask

H = W = 16


def rnd(shape, seed, scale=1.0):
    gen = torch.Generator().manual_seed(seed)
    return scale * torch.randn(shape, generator=gen, dtype=torch.float64)


@pytest.fixture
def image():
    return checker_image(H, W)


@pytest.fixture
def scene(image):
    """Graph, model, table for a 2-concept scene over a 16x16 image."""
    graph = sg.build_graph(
        image,
        concepts=[("env", 1, None), ("forest", 2, half_mask(H, W))],
    )
    codec = df.LatentCodec()
    model = df.ToyDenoiser(codec.latent_shape((H, W)), df.NoiseSchedule.linear())
    table = df.EmbeddingTable(model.token_dim)
    tr.ensure_handle_embeddings(table, graph)
    return graph, model, table, codec


class TestLossRec:
    def test_all_zero_mask(self):
        eps, eps_hat = rnd((3, 4, 4), 1), rnd((3, 4, 4), 2)
        assert tr.loss_rec(eps, eps_hat, torch.zeros(4, 4, dtype=torch.float64)).item() == 0.0

    def test_all_ones_equals_prior(self):
        eps, eps_hat = rnd((3, 4, 4), 3), rnd((3, 4, 4), 4)
        m = torch.ones(4, 4, dtype=torch.float64)
        assert tr.loss_rec(eps, eps_hat, m).item() == tr.loss_prior(eps, eps_hat).item()

    def test_forced_arithmetic(self):
        eps = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        zero = torch.zeros_like(eps)
        assert tr.loss_rec(eps, zero, torch.ones(2, 2, dtype=torch.float64)).item() == 0.5

    def test_complement_additivity(self, rng):
        for seed in range(200):
            eps, eps_hat = rnd((3, 4, 4), 2 * seed), rnd((3, 4, 4), 2 * seed + 1)
            m = torch.from_numpy((rng.random((4, 4)) < 0.5).astype(np.float64))
            lhs = tr.loss_rec(eps, eps_hat, m) + tr.loss_rec(eps, eps_hat, 1 - m)
            rhs = tr.loss_prior(eps, eps_hat)
            assert abs(lhs.item() - rhs.item()) <= 1e-15 * max(1.0, rhs.item())


class TestLossPrior:
    def test_zero_when_equal(self):
        eps = rnd((3, 4, 4), 5)
        assert tr.loss_prior(eps, eps).item() == 0.0

    def test_unit_residual(self):
        eps = torch.ones(2, 2, dtype=torch.float64)
        assert tr.loss_prior(eps, torch.zeros_like(eps)).item() == 1.0


class TestLossAttn:
    def test_exact_match_is_zero(self):
        m = torch.zeros(4, 4, dtype=torch.float64)
        m[:, :2] = 1.0
        maps = tr.attention_target(m).unsqueeze(0)
        assert tr.loss_attn(maps, ["<a>"], {"<a>": m}).item() == 0.0

    def test_uniform_half_mask(self):
        m = torch.zeros(4, 4, dtype=torch.float64)
        m[:, :2] = 1.0  # left half; area-avg to 2x2 stays binary
        maps = torch.full((1, 2, 2), 0.5, dtype=torch.float64)
        assert tr.loss_attn(maps, ["<a>"], {"<a>": m}).item() == 0.25

    def test_mean_over_handles_matches_loop(self, rng):
        handles = ["<a>", "<r>", "<b>"]
        masks = {h: torch.from_numpy((rng.random((4, 4)) < 0.5).astype(np.float64)) for h in handles}
        maps = torch.from_numpy(rng.random((3, 2, 2)))
        per_handle = [
            ((maps[i] - tr.attention_target(masks[h])) ** 2).mean().item()
            for i, h in enumerate(handles)
        ]
        got = tr.loss_attn(maps, handles, masks).item()
        assert got == pytest.approx(np.mean(per_handle), rel=1e-12)

    def test_missing_map_and_mask(self):
        m = torch.ones(4, 4, dtype=torch.float64)
        with pytest.raises(MissingMap):
            tr.loss_attn(torch.zeros(1, 2, 2, dtype=torch.float64), ["<a>", "<b>"], {"<a>": m})
        with pytest.raises(MissingMask):
            tr.loss_attn(torch.zeros(1, 2, 2, dtype=torch.float64), ["<a>"], {})


def make_sample(scene, origin="original"):
    graph, model, table, codec = scene
    image = checker_image(H, W)
    s = tr.build_edge_sample(graph, graph.edges[0].id, image, codec)
    return tr.TrainingSample(
        latent=s.latent, tokens=s.tokens, union_mask=s.union_mask,
        handle_masks=s.handle_masks, origin=origin, edge_id=s.edge_id,
    )


class TestLossTotal:
    def test_zero_weights_original_is_rec(self, scene):
        graph, model, table, codec = scene
        sample = make_sample(scene)
        eps = rnd(sample.latent.shape, 7)
        w = tr.LossWeights(lambda_prior=0.0, lambda_attn=0.0)
        total, parts = tr.loss_total(sample, model, table, 40, eps, w)
        assert total.item() == parts["loss_rec"]

    def test_prior_origin(self, scene):
        graph, model, table, codec = scene
        sample = make_sample(scene, origin="prior")
        eps = rnd(sample.latent.shape, 8)
        w = tr.LossWeights(lambda_prior=1.0, lambda_attn=0.0)
        total, parts = tr.loss_total(sample, model, table, 40, eps, w)
        assert total.item() == pytest.approx(parts["loss_prior"], rel=1e-15)

    def test_component_sum_oracle(self, scene):
        graph, model, table, codec = scene
        sample = make_sample(scene)
        eps = rnd(sample.latent.shape, 9)
        w = tr.LossWeights(lambda_prior=0.5, lambda_attn=0.25)
        total, parts = tr.loss_total(sample, model, table, 17, eps, w, loss_split="joint")
        expected = (
            parts["loss_rec"] + 0.5 * parts["loss_prior"] + 0.25 * parts["loss_attn"]
        )
        assert total.item() == pytest.approx(expected, rel=1e-12)


class TestPriorSamples:
    def test_count_zero(self, scene):
        graph, model, table, codec = scene
        painter = to_outpainter(model, table, codec=codec)
        out = tr.make_prior_samples(graph, graph.edges[0].id, painter, 0, 3, checker_image(H, W))
        assert out == []

    def test_all_ones_union_gives_original(self, scene):
        # the R1 edge's union mask is the full frame: nothing to outpaint
        graph, model, table, codec = scene
        image = checker_image(H, W)
        painter = to_outpainter(model, table, codec=codec)
        samples = tr.make_prior_samples(graph, graph.edges[0].id, painter, 2, 3, image)
        z0 = codec.encode(image)
        for s in samples:
            assert torch.equal(s.latent, z0)
            assert s.origin == "prior"

    def test_known_region_pixel_identical(self, image):
        # R2 edge between two quarter regions: union mask is half the frame
        qa = np.zeros((H, W), dtype=np.uint8)
        qa[:, : W // 4] = 1
        qb = np.zeros((H, W), dtype=np.uint8)
        qb[:, W // 4 : W // 2] = 1
        graph = sg.build_graph(
            image,
            concepts=[("a", 2, qa), ("b", 2, qb)],
            relations=[("R2", ("a", "b"))],
        )
        codec = df.LatentCodec()
        model = df.ToyDenoiser(codec.latent_shape((H, W)), df.NoiseSchedule.linear())
        table = df.EmbeddingTable(model.token_dim)
        tr.ensure_handle_embeddings(table, graph)
        painter = to_outpainter(model, table, codec=codec)
        samples = tr.make_prior_samples(graph, graph.edges[0].id, painter, 4, 11, image)
        z0 = codec.encode(image)
        keep = samples[0].union_mask.bool()
        assert keep.any() and not keep.all()
        for s in samples:
            assert torch.equal(s.latent[:, keep], z0[:, keep])
        # deterministic per seed
        again = tr.make_prior_samples(graph, graph.edges[0].id, painter, 4, 11, image)
        for s1, s2 in zip(samples, again):
            assert torch.equal(s1.latent, s2.latent)


def quick_config(**kw):
    defaults = dict(phase1_steps=10, phase2_steps=10, refine_steps=5, seed=5, prior_count=1, prior_steps=2)
    defaults.update(kw)
    return tr.TrainConfig(**defaults)


class TestTrainConstruction:
    def test_zero_steps_identity(self, scene, image):
        graph, model, table, codec = scene
        cfg = quick_config(phase1_steps=0, phase2_steps=0)
        model2, table2 = tr.train_construction(graph, image, model, table, cfg)
        assert model.equal_weights(model2)
        assert table.equal(table2)

    def test_phase1_only_freezes_weights(self, scene, image):
        graph, model, table, codec = scene
        cfg = quick_config(phase1_steps=50, phase1_lr=1e-2, phase2_steps=0)
        model2, table2 = tr.train_construction(graph, image, model, table, cfg)
        assert model.equal_weights(model2)
        changed = [
            tok for tok in table.vectors
            if not torch.equal(table.vectors[tok], table2.vectors[tok])
        ]
        assert len(changed) >= 1

    def test_inputs_never_mutated(self, scene, image):
        graph, model, table, codec = scene
        before = {k: v.clone() for k, v in table.vectors.items()}
        weights_before = {k: v.clone() for k, v in model.named_parameters()}
        tr.train_construction(graph, image, model, table, quick_config())
        assert all(torch.equal(before[k], table.vectors[k]) for k in before)
        assert all(torch.equal(weights_before[k], v) for k, v in model.named_parameters())

    def test_deterministic(self, scene, image):
        graph, model, table, codec = scene
        m1, t1 = tr.train_construction(graph, image, model, table, quick_config())
        m2, t2 = tr.train_construction(graph, image, model, table, quick_config())
        assert m1.equal_weights(m2)
        assert t1.equal(t2)

    def test_empty_graph(self, image):
        graph = sg.build_graph(image, concepts=[("forest", 2, half_mask(H, W))], relations=[])
        codec = df.LatentCodec()
        model = df.ToyDenoiser(codec.latent_shape((H, W)), df.NoiseSchedule.linear())
        with pytest.raises(EmptyGraph):
            tr.train_construction(graph, image, model, df.EmbeddingTable(8), quick_config())

    def test_divergence_guard(self, scene, image):
        graph, model, table, codec = scene
        cfg = quick_config(phase2_steps=400, phase2_lr=1e6)
        with pytest.raises(DivergedLoss):
            tr.train_construction(graph, image, model, table, cfg)

    def test_training_log_schema(self, scene, image):
        graph, model, table, codec = scene
        records = []
        tr.train_construction(graph, image, model, table, quick_config(), log=records.append)
        assert len(records) == 20
        assert {"step", "phase", "edge_id", "t", "loss_rec", "loss_prior", "loss_attn", "loss_total"} <= set(records[0])
        assert {r["phase"] for r in records} == {"phase1", "phase2"}


class TestTrainRefine:
    def refine_setup(self, scene, image):
        graph, model, table, codec = scene
        cfg = quick_config()
        model, table = tr.train_construction(graph, image, model, table, cfg)
        hint = half_mask(H, W, "bottom")
        graph2, edge_id, new_handles = sg.apply_instruction(
            graph, sg.RefineInstruction("add", description="waterfall", mask_hint=hint)
        )
        return graph2, edge_id, new_handles, model, table, cfg

    def test_zero_steps_identity(self, scene, image):
        graph2, edge_id, _, model, table, cfg = self.refine_setup(scene, image)
        cfg0 = quick_config(refine_steps=0)
        m2, t2 = tr.train_refine(graph2, edge_id, image, model, table, cfg0)
        assert model.equal_weights(m2)

    def test_only_new_handles_move(self, scene, image):
        graph2, edge_id, new_handles, model, table, cfg = self.refine_setup(scene, image)
        cfg = quick_config(refine_steps=25, refine_lr=1e-2)
        m2, t2 = tr.train_refine(graph2, edge_id, image, model, table, cfg)
        assert not model.equal_weights(m2)
        for tok in table.vectors:
            if tok in new_handles:
                continue
            assert torch.equal(table.vectors[tok], t2.vectors[tok]), tok
        moved = [tok for tok in new_handles if not torch.equal(t2.vectors[tok], table.vectors.get(tok, t2.vectors[tok]))]
        # new handles were absent before refine; they must now exist
        assert all(tok in t2.vectors for tok in new_handles)

    def test_loss_decreases(self, scene, image):
        graph2, edge_id, _, model, table, cfg = self.refine_setup(scene, image)
        records = []
        cfg = quick_config(refine_steps=50)
        tr.train_refine(graph2, edge_id, image, model, table, cfg, log=records.append)
        first = np.mean([r["loss_total"] for r in records[:10]])
        last = np.mean([r["loss_total"] for r in records[-10:]])
        assert last < first
