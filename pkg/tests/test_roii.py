import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from conftest import finite_difference_check
from rtatl.models.roii import (EmptyBatch, Generator, PatchCritic, RoIIBatch, RoIIHeads, adversarial_losses,
                               pseudo_label, reconstruction_loss, roii_step, semantic_losses)

SMALL = dict(gen_channels=(32, 16, 16, 8), disc_channels=(4, 8, 8, 16))


def _toy_heads(size=8, d=8, dtype=torch.float64):
    torch.manual_seed(0)
    return RoIIHeads(d, size, **SMALL).to(dtype)


def _toy_batch(n=4, size=8, d=8, dtype=torch.float64):
    g = torch.Generator().manual_seed(1)
    return RoIIBatch(x=torch.randn(n, d, generator=g, dtype=dtype),
                     p=torch.rand(n, 3, size, size, generator=g, dtype=dtype),
                     y_hat=torch.tensor([0, 1] * (n // 2)))


def test_generator_shape_and_range():
    torch.manual_seed(0)
    g = Generator(128, 48, (32, 16, 16, 8))
    out = g(torch.randn(5, 128))
    assert out.shape == (5, 3, 48, 48)
    assert ((out > 0) & (out < 1)).all()
    kinds = [type(m) for m in g.net]
    assert kinds.count(nn.ConvTranspose2d) == 5 and kinds[-1] is nn.Sigmoid


def test_generator_is_deterministic_and_input_dependent():
    g = Generator(16, 24, (16, 8, 8, 4)).eval()
    x = torch.randn(2, 16)
    assert torch.equal(g(x), g(x))
    assert not torch.allclose(g(x)[0], g(x)[1])


def test_critic_structure_and_range():
    c = PatchCritic(48, (8, 8, 16, 16))
    assert sum(isinstance(m, nn.Conv2d) for m in c.net) == 5
    out = c(torch.rand(6, 3, 48, 48))
    assert out.shape == (6,) and ((out > 0) & (out < 1)).all()
    with pytest.raises(ValueError):
        c(torch.rand(6, 3, 24, 24))


def test_adversarial_closed_forms():
    half = torch.full((4,), 0.5)
    l_adv, l_adv_g = adversarial_losses(half, half)
    assert float(l_adv) == pytest.approx(-1.3863, abs=1e-4)
    assert float(l_adv_g) == pytest.approx(0.6931, abs=1e-4)
    l_adv, _ = adversarial_losses(torch.ones(4), torch.zeros(4))
    assert -1e-5 < float(l_adv) <= 0.0
    assert torch.isfinite(adversarial_losses(torch.zeros(3), torch.ones(3))[0])


def test_reconstruction_closed_forms():
    p = torch.zeros(2, 3, 48, 48)
    g = torch.full_like(p, 0.5)
    assert float(reconstruction_loss(p, g)) == pytest.approx(3456.0)
    assert float(reconstruction_loss(p, g, "mean")) == pytest.approx(0.5)
    assert float(reconstruction_loss(g, g)) == 0.0
    with pytest.raises(ValueError):
        reconstruction_loss(p, g, "max")


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_reconstruction_triangle_inequality(seed):
    gen = torch.Generator().manual_seed(seed)
    a, b, c = (torch.rand(2, 3, 6, 6, generator=gen, dtype=torch.float64) for _ in range(3))
    assert reconstruction_loss(a, c) <= reconstruction_loss(a, b) + reconstruction_loss(b, c) + 1e-9


def test_semantic_closed_forms():
    y = torch.tensor([0, 1, 1, 0])
    l_c, l_c_g = semantic_losses(y.double(), y.double(), y)
    assert float(l_c) < 1e-6 and float(l_c_g) < 1e-6
    half = torch.full((4,), 0.5)
    l_c, l_c_g = semantic_losses(half, half, y)
    assert float(l_c) == pytest.approx(math.log(2)) and float(l_c_g) == pytest.approx(math.log(2))
    with pytest.raises(ValueError, match="binary"):
        semantic_losses(half, half, torch.tensor([0, 2, 1, 0]))


def test_pseudo_label_threshold():
    probs = torch.tensor([0.7, 0.5, 0.49])
    assert [int(pseudo_label(probs, i)) for i in range(3)] == [1, 1, 0]
    batch = torch.tensor([[0.7, 0.2], [0.1, 0.5], [0.3, 0.49]])
    assert pseudo_label(batch, torch.tensor([0, 1, 1])).tolist() == [1, 1, 0]
    assert pseudo_label(batch, torch.tensor([0, 0, 0]), threshold=0.3).tolist() == [1, 0, 1]


def test_step_composition():
    heads, batch = _toy_heads(), _toy_batch()
    for lam1, lam2 in [(0.1, 0.1), (0.3, 0.7), (0.0, 0.1)]:
        out = roii_step(heads, batch, lam1, lam2)
        expected = lam1 * out.l_adv_g + (1 - lam1) * out.l_rec + lam2 * out.l_c_g
        assert abs(float((out.l_g - expected).detach())) <= 1e-7
        assert torch.equal(out.l_d, -out.l_adv)
    zero = roii_step(heads, batch, 0.0, 0.1)
    assert abs(float((zero.l_g - zero.l_rec - 0.1 * zero.l_c_g).detach())) <= 1e-7
    mean = roii_step(heads, batch, reduction="mean")
    assert mean.l_rec.item() == pytest.approx(zero.l_rec.item() / (3 * 8 * 8))


def test_empty_batch():
    heads = _toy_heads()
    empty = RoIIBatch(torch.zeros(0, 8, dtype=torch.float64), torch.zeros(0, 3, 8, 8, dtype=torch.float64),
                      torch.zeros(0, dtype=torch.long))
    with pytest.raises(EmptyBatch):
        heads.step(empty)


def test_discriminator_learns_to_separate_toy_sets():
    torch.manual_seed(0)
    d = PatchCritic(8, (4, 8, 8, 16))
    opt = torch.optim.Adam(d.parameters(), lr=3e-3)
    g = torch.Generator().manual_seed(0)
    real = 0.7 + 0.3 * torch.rand(32, 3, 8, 8, generator=g)
    fake = 0.3 * torch.rand(32, 3, 8, 8, generator=g)
    for _ in range(150):
        l_adv, _ = adversarial_losses(d(real), d(fake))
        opt.zero_grad()
        (-l_adv).backward()
        opt.step()
    with torch.no_grad():
        assert float(d(real).mean()) > float(d(fake).mean()) + 0.3


def _params(module):
    return [p for p in module.parameters()]


@pytest.mark.parametrize("term,owner", [("l_adv_g", "generator"), ("l_rec", "generator"),
                                        ("l_c_g", "generator"), ("l_adv", "discriminator"),
                                        ("l_c", "classifier"), ("l_g", "generator")])
def test_gradients_match_finite_differences(term, owner):
    heads, batch = _toy_heads(), _toy_batch()
    batch.x.requires_grad_(True)
    params = _params(getattr(heads, owner))[:2]
    tensors = params + ([batch.x] if owner == "generator" else [])

    def loss():
        return getattr(heads.step(batch, 0.1, 0.1), term)

    # the toy generator's gradients are tiny, so a small step would drown in roundoff
    assert finite_difference_check(loss, tensors, n_coords=30, h=1e-4) < 1e-4


def test_generator_step_leaves_frozen_critics_without_gradient():
    heads, batch = _toy_heads(), _toy_batch()
    for p in heads.critic_parameters():
        p.requires_grad_(False)
    heads.step(batch).l_g.backward()
    assert all(p.grad is None for p in heads.critic_parameters())
    assert any(float(p.grad.abs().max()) > 0 for p in heads.generator.parameters())


def test_semantic_generator_term_reaches_only_the_generator():
    heads, batch = _toy_heads(), _toy_batch()
    for p in heads.classifier.parameters():
        p.requires_grad_(False)
    heads.step(batch).l_c_g.backward()
    assert all(p.grad is None for p in heads.classifier.parameters())
    assert all(p.grad is None for p in heads.discriminator.parameters())
    assert any(float(p.grad.abs().max()) > 0 for p in heads.generator.parameters())
