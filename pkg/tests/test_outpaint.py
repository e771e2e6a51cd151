import numpy as np
import pytest
import torch

from scenewalk import diffusion as df
from scenewalk import outpaint as op
from scenewalk.errors import AllUnknownWithoutPrompt, EmptyImage, ShapeMismatch

from conftest import checker_image, half_mask

H = W = 16
TOKENS = ("<env>", "<r0>", "<forest>")


@pytest.fixture
def stack():
    codec = df.LatentCodec()
    model = df.ToyDenoiser(codec.latent_shape((H, W)), df.NoiseSchedule.linear())
    table = df.EmbeddingTable(model.token_dim)
    for tok in TOKENS:
        table.add(tok, trainable=True)
    return model, table, codec


def request(image=None, fill=None, seed=3, steps=8):
    return op.OutpaintRequest(
        partial_image=checker_image(H, W) if image is None else image,
        fill_mask=half_mask(H, W, "right") if fill is None else fill,
        prompt_tokens=TOKENS,
        seed=seed,
        steps=steps,
    )


class TestMaskToLatent:
    def test_all_ones(self):
        m = op.mask_to_latent(np.ones((H, W), dtype=np.uint8), (3, 4, 4))
        assert torch.equal(m, torch.ones(4, 4, dtype=torch.float64))

    def test_all_zeros(self):
        m = op.mask_to_latent(np.zeros((H, W), dtype=np.uint8), (3, 4, 4))
        assert torch.equal(m, torch.zeros(4, 4, dtype=torch.float64))

    def test_single_block(self):
        px = np.zeros((H, W), dtype=np.uint8)
        px[4:8, 8:12] = 1  # exactly one 4x4 latent cell
        m = op.mask_to_latent(px, (3, 4, 4))
        assert m.sum().item() == 1.0
        assert m[1, 2].item() == 1.0

    def test_half_coverage_ties_to_generate(self):
        px = np.zeros((H, W), dtype=np.uint8)
        px[0:2, 0:4] = 1  # half of the first block
        m = op.mask_to_latent(px, (3, 4, 4))
        assert m[0, 0].item() == 1.0

    def test_monotone(self, rng):
        for _ in range(50):
            a = (rng.random((H, W)) < 0.4).astype(np.uint8)
            grown = a | (rng.random((H, W)) < 0.2).astype(np.uint8)
            ma = op.mask_to_latent(a, (3, 4, 4))
            mg = op.mask_to_latent(grown, (3, 4, 4))
            assert (mg >= ma).all()


class TestOutpaint:
    def test_all_zero_fill_composite_off(self, stack):
        model, table, codec = stack
        painter = op.to_outpainter(model, table, codec=codec, pixel_composite=False)
        img = checker_image(H, W)
        out = painter(request(fill=np.zeros((H, W), dtype=np.uint8)))
        expect = codec.decode(codec.encode(img))
        assert np.array_equal(out, expect)

    def test_all_zero_fill_composite_on(self, stack):
        model, table, codec = stack
        painter = op.to_outpainter(model, table, codec=codec)
        img = checker_image(H, W)
        out = painter(request(fill=np.zeros((H, W), dtype=np.uint8)))
        assert np.array_equal(out, img)

    def test_all_ones_fill_equals_unconditional_sample(self, stack):
        model, table, codec = stack
        painter = op.to_outpainter(model, table, codec=codec)
        req = request(fill=np.ones((H, W), dtype=np.uint8), seed=9, steps=12)
        out = painter(req)
        prompt = df.encode_prompt(table, list(TOKENS))
        z = df.sample(model, model.latent_shape, prompt, 12, seed=9)
        assert np.array_equal(out, codec.decode(z))

    def test_half_mask_known_pixels_exact(self, stack):
        model, table, codec = stack
        img = checker_image(H, W)
        fill = half_mask(H, W, "right")
        for composite in (False, True):
            painter = op.to_outpainter(model, table, codec=codec, pixel_composite=composite)
            out = painter(request(image=img, fill=fill))
            z_out = codec.encode(out)
            z_in = codec.encode(img)
            known = op.mask_to_latent(fill, z_in.shape) == 0
            assert known.any()
            assert torch.equal(z_out[:, known], z_in[:, known])
        # composite additionally pins the pixels themselves
        assert np.array_equal(out[fill == 0], img[fill == 0])

    def test_deterministic_per_seed(self, stack):
        model, table, codec = stack
        painter = op.to_outpainter(model, table, codec=codec)
        a = painter(request(seed=21))
        b = painter(request(seed=21))
        c = painter(request(seed=22))
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_conversion_is_stateless(self, stack):
        model, table, codec = stack
        p1 = op.to_outpainter(model, table, codec=codec)
        p2 = op.to_outpainter(model, table, codec=codec)
        assert np.array_equal(p1(request()), p2(request()))

    def test_reflects_weight_mutation(self, stack):
        model, table, codec = stack
        painter = op.to_outpainter(model, table, codec=codec)
        before = painter(request())
        with torch.no_grad():
            model.canvas.add_(0.05)
        after = painter(request())
        assert not np.array_equal(before, after)

    def test_empty_image(self, stack):
        model, table, codec = stack
        painter = op.to_outpainter(model, table, codec=codec)
        with pytest.raises(EmptyImage):
            painter(
                op.OutpaintRequest(
                    partial_image=np.zeros((0, 0, 3)),
                    fill_mask=np.zeros((0, 0), dtype=np.uint8),
                    prompt_tokens=TOKENS,
                    seed=0,
                )
            )

    def test_all_unknown_without_prompt(self, stack):
        model, table, codec = stack
        painter = op.to_outpainter(model, table, codec=codec)
        with pytest.raises(AllUnknownWithoutPrompt):
            painter(
                op.OutpaintRequest(
                    partial_image=checker_image(H, W),
                    fill_mask=np.ones((H, W), dtype=np.uint8),
                    prompt_tokens=(),
                    seed=0,
                )
            )

    def test_blend_idempotent(self, stack):
        model, table, codec = stack
        z_known = codec.encode(checker_image(H, W))
        m = op.mask_to_latent(half_mask(H, W), z_known.shape).bool().unsqueeze(0)
        eps = torch.randn(z_known.shape, generator=torch.Generator().manual_seed(4), dtype=torch.float64)
        z = torch.randn(z_known.shape, generator=torch.Generator().manual_seed(5), dtype=torch.float64)
        for t in (0, 3, 77):
            keep = df.add_noise(model.schedule, z_known, t, eps)
            once = torch.where(m, z, keep)
            twice = torch.where(m, once, keep)
            assert torch.equal(once, twice)
