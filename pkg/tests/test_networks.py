import math

import pytest
import torch

from bitstain.errors import ConfigError, ParameterError, ShapeError
from bitstain.networks import (FeaturePyramid, Generator, GeneratorConfig, PatchDiscriminator,
                               expand_patch_mask, mae_pretrain_step, masked_reconstruction_loss,
                               random_patch_mask)


@pytest.fixture(scope="module")
def gen():
    return Generator(GeneratorConfig(seed=5))


def rand_tile(b=2, n=64, seed=0):
    return torch.rand(b, 3, n, n, generator=torch.Generator().manual_seed(seed)) * 2 - 1


def test_pyramid_widths(gen):
    out = gen(rand_tile())
    assert out.image.shape == (2, 3, 64, 64)
    assert out.pyramid.scales == (1, 2, 4, 16)
    assert [out.pyramid[k].shape[-1] for k in (1, 2, 4, 16)] == [64, 32, 16, 4]
    assert out.pyramid[16].shape[1] == gen.config.token_dim
    assert out.style.shape == (2, gen.config.token_dim)


def test_forward_deterministic(gen):
    x = rand_tile()
    s = torch.randn(64, generator=torch.Generator().manual_seed(1))
    a, b = gen(x, style_override=s), gen(x, style_override=s)
    assert torch.equal(a.image, b.image) and torch.equal(a.style, b.style)


def test_override_with_own_token_is_identical(gen):
    x = rand_tile(seed=3)
    plain = gen(x)
    again = gen(x, style_override=plain.style)
    assert torch.equal(plain.image, again.image)


def test_override_changes_output(gen):
    x = rand_tile(seed=3)
    plain = gen(x)
    other = gen(x, style_override=plain.style * 3 + 1)
    assert not torch.equal(plain.image, other.image)
    # the returned style is always the network's own token
    assert torch.equal(plain.style, other.style)


def test_override_dim_mismatch(gen):
    with pytest.raises(ShapeError):
        gen(rand_tile(), style_override=torch.zeros(7))


def test_encode_matches_forward(gen):
    x = rand_tile(seed=4)
    enc, fwd = gen.encode(x), gen(x).pyramid
    for k in fwd:
        assert torch.equal(enc[k], fwd[k])
    assert enc[1].shape[-2:] == x.shape[-2:]


def test_input_shape_checked(gen):
    with pytest.raises(ShapeError):
        gen(torch.zeros(1, 3, 32, 32))
    with pytest.raises(ShapeError):
        gen(torch.zeros(1, 1, 64, 64))


def test_output_bounded():
    g = Generator(GeneratorConfig(seed=2, init_gain=8.0))
    x = rand_tile(seed=9) * 100
    y = g(x).image
    assert torch.isfinite(y).all() and y.abs().max() <= 1.0


def test_all_parameter_gradients_finite(gen):
    gen.zero_grad()
    out = gen(rand_tile(seed=6))
    (out.image.square().mean() + out.style.square().mean()
     + sum(v.abs().mean() for _, v in out.pyramid.items())).backward()
    for name, p in gen.named_parameters():
        assert p.grad is not None, name
        assert torch.isfinite(p.grad).all(), name
    gen.zero_grad()


def test_same_seed_same_parameters():
    a, b = Generator(GeneratorConfig(seed=1)), Generator(GeneratorConfig(seed=1))
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q), n


@pytest.mark.parametrize("kw", [dict(scales=(1, 2, 4, 8, 16)), dict(scales=(1, 3, 4, 16)),
                                dict(scales=(1, 2, 4, 128)), dict(extra_tokens=2),
                                dict(input_size=72)])
def test_invalid_generator_configs(kw):
    with pytest.raises(ConfigError):
        GeneratorConfig(**kw)


def test_sixteen_pixel_config():
    g = Generator(GeneratorConfig(input_size=16, stage_channels=(4, 6, 8), token_dim=8, vit_heads=2))
    out = g(torch.zeros(1, 3, 16, 16))
    assert [out.pyramid[k].shape[-1] for k in (1, 2, 4, 16)] == [16, 8, 4, 1]


def test_discriminator_grid():
    d = PatchDiscriminator(seed=0)
    logits = d(rand_tile())
    assert logits.shape == (2, 1, 8, 8)
    zeros = d(torch.zeros(1, 3, 64, 64))
    assert torch.isfinite(zeros).all()
    x = rand_tile(seed=8)
    assert torch.equal(d(x), d(x))


def test_mask_count():
    gen_ = torch.Generator().manual_seed(0)
    mask = random_patch_mask(3, 4, 0.4, gen_)
    assert mask.shape == (3, 4, 4)
    assert mask.view(3, -1).sum(1).tolist() == [math.floor(0.4 * 16)] * 3 == [6, 6, 6]


@pytest.mark.parametrize("ratio", [0.0, 1.0, -0.2, 1.5])
def test_mask_ratio_range(ratio):
    with pytest.raises(ParameterError):
        random_patch_mask(1, 4, ratio, torch.Generator())


def test_masked_loss_ignores_visible_targets():
    gen_ = torch.Generator().manual_seed(1)
    mask = expand_patch_mask(random_patch_mask(2, 4, 0.4, gen_), 16)
    pred = rand_tile(seed=1)
    target = rand_tile(seed=2)
    base = masked_reconstruction_loss(pred, target, mask)
    perturbed = target.clone()
    perturbed[~mask.expand_as(target)] += 5.0
    assert torch.equal(masked_reconstruction_loss(pred, perturbed, mask), base)
    hidden = target.clone()
    hidden[mask.expand_as(target)] += 1.0
    assert masked_reconstruction_loss(pred, hidden, mask) != base


def test_masked_loss_zero_for_perfect_constant_decoder():
    class ConstantGenerator(Generator):
        def forward(self, x, **kw):
            out = super().forward(x, **kw)
            return out._replace(image=torch.full_like(x, 0.25) + 0 * out.image)

    g = ConstantGenerator(GeneratorConfig())
    opt = torch.optim.SGD(g.parameters(), lr=0.0)
    batch = torch.full((2, 3, 64, 64), 0.25)
    assert mae_pretrain_step(g, opt, batch, 0.4, torch.Generator().manual_seed(0)) == 0.0


def test_mae_step_updates_parameters():
    g = Generator(GeneratorConfig(seed=3))
    before = [p.detach().clone() for p in g.parameters()]
    opt = torch.optim.Adam(g.parameters(), lr=1e-3)
    loss = mae_pretrain_step(g, opt, rand_tile(seed=5), 0.4, torch.Generator().manual_seed(0))
    assert math.isfinite(loss) and loss > 0
    assert any(not torch.equal(a, b) for a, b in zip(before, g.parameters()))


def test_pyramid_detach():
    t = torch.ones(1, 2, 2, 2, requires_grad=True)
    p = FeaturePyramid({2: t * 2, 1: t})
    assert p.scales == (1, 2)
    assert not any(v.requires_grad for _, v in p.detach().items())
