import numpy as np
import pytest
import torch

from stereoprior.losses import (
    LossWeights,
    guidance,
    mono_terms,
    occlusion_composite,
    occlusion_mask,
    photometric,
    smoothness,
    ssim,
    stereo_terms,
    total_objectives,
)
from stereoprior.numerics import finite_diff_check, warp_horizontal

f64 = torch.float64


def test_ssim_identity_and_constants(gen):
    a = torch.rand(3, 8, 8, generator=gen, dtype=f64)
    assert torch.allclose(ssim(a, a), torch.ones(8, 8, dtype=f64), atol=1e-12)
    c = torch.full((3, 6, 6), 0.3, dtype=f64)
    assert torch.allclose(ssim(c, c), torch.ones(6, 6, dtype=f64), atol=1e-12)


def test_ssim_negative_on_inverted_checkerboard():
    ii, jj = torch.meshgrid(torch.arange(8), torch.arange(8), indexing="ij")
    b = ((ii + jj) % 2).to(f64).expand(3, 8, 8)
    assert bool((ssim(1 - b, b) < 0).all())


def test_photometric_examples(gen):
    t = torch.rand(3, 8, 8, generator=gen, dtype=f64)
    assert photometric(t, t, 0.15).item() == pytest.approx(0.0, abs=1e-12)
    r = torch.rand(3, 8, 8, generator=gen, dtype=f64)
    assert photometric(r, t, 1.0).item() == pytest.approx((r - t).abs().mean().item(), abs=1e-15)
    assert photometric(t + 0.1, t, 1.0).item() == pytest.approx(0.1, abs=1e-12)


def test_occlusion_constant_disparity(gen):
    img = torch.rand(1, 3, 6, 12, generator=gen, dtype=f64)
    mono = torch.rand(1, 3, 6, 12, generator=gen, dtype=f64)
    comp, masks = occlusion_composite(img, mono, torch.full((1, 1, 6, 12), 2.0, dtype=f64))
    assert bool((masks.m_occ == 1).all())
    assert torch.equal(comp, img)
    assert bool((masks.m_out[..., :2] == 1).all()) and bool((masks.m_out[..., 2:] == 0).all())


def test_occlusion_two_plane_band():
    d = torch.full((1, 1, 4, 40), 2.0, dtype=f64)
    d[..., 20:30] = 8.0
    m = occlusion_mask(d)[0, 0, 0]
    assert torch.nonzero(m == 0).flatten().tolist() == list(range(14, 20))


def test_occlusion_all_occluded_gives_mono(gen, monkeypatch):
    from stereoprior import losses

    img = torch.rand(1, 3, 4, 6, generator=gen, dtype=f64)
    mono = torch.rand(1, 3, 4, 6, generator=gen, dtype=f64)
    monkeypatch.setattr(losses, "occlusion_mask", lambda d: torch.zeros_like(d))
    comp, _ = losses.occlusion_composite(img, mono, torch.ones(1, 1, 4, 6, dtype=f64))
    assert torch.equal(comp, mono)


def test_occlusion_rejects_negative():
    with pytest.raises(ValueError):
        occlusion_composite(torch.zeros(3, 2, 2), torch.zeros(3, 2, 2), -torch.ones(1, 2, 2))


def test_smoothness_examples():
    const_img = torch.full((1, 3, 8, 8), 0.5, dtype=f64)
    assert smoothness(torch.full((1, 1, 8, 8), 3.0, dtype=f64), const_img).item() == 0.0
    ramp = torch.arange(8, dtype=f64).view(1, 1, 1, 8).expand(1, 1, 8, 8) * 0.5 + 1.0
    expected = 0.5 / ramp.mean().item()
    assert smoothness(ramp, const_img).item() == pytest.approx(expected, rel=1e-6)
    edges = const_img.clone()
    edges[..., 1::2] = 1.0
    assert smoothness(ramp, edges).item() < expected


def test_guidance_examples(gen):
    d1 = torch.rand(1, 1, 6, 6, generator=gen, dtype=f64) * 5
    zeros, ones = torch.zeros_like(d1), torch.ones_like(d1)
    assert guidance(d1, d1, ones).item() == 0.0
    assert guidance(d1, d1 + 2.5, zeros).item() == pytest.approx(0.0, abs=1e-14)
    assert guidance(d1, d1 + 1.0, ones).item() == pytest.approx(1.0, abs=1e-14)


def test_total_objectives_endpoints():
    w = LossWeights(lambda3=0.0, lambda4=0.0)
    rec, sm, gd = torch.tensor(0.3), torch.tensor(2.0), torch.tensor(5.0)
    assert total_objectives("stereo", w, rec, sm, gd).item() == pytest.approx(0.3)
    z = torch.tensor(0.0)
    assert total_objectives("mono", LossWeights(), z, z).item() == 0.0
    with pytest.raises(ValueError):
        total_objectives("stereo", w, rec, sm)
    with pytest.raises(ValueError):
        total_objectives("other", w, rec, sm)
    with pytest.raises(ValueError):
        LossWeights(alpha_photo=1.5)


def _scene(gen, h=16, w=16, shift=2.0):
    left = torch.rand(1, 3, h, w, generator=gen, dtype=f64)
    right = torch.rand(1, 3, h, w, generator=gen, dtype=f64)
    d = torch.full((1, 1, h, w), shift, dtype=f64) + 0.3 * torch.rand(1, 1, h, w, generator=gen, dtype=f64)
    return left, right, d


def test_losses_non_negative(gen):
    left, right, d = _scene(gen)
    terms = stereo_terms(left, right, d, d + 0.4, LossWeights())
    assert all(v.item() >= 0 for v in terms.values())
    terms = mono_terms(left, right, d, LossWeights())
    assert all(v.item() >= 0 for v in terms.values())


def test_stereo_loss_zero_at_fixed_point(gen):
    right = torch.rand(1, 3, 8, 16, generator=gen, dtype=f64)
    d = torch.full((1, 1, 8, 16), 0.0, dtype=f64)
    terms = stereo_terms(right, right, d, d, LossWeights())
    assert terms["rec"].item() == pytest.approx(0.0, abs=1e-12)
    assert terms["guide"].item() == 0.0
    assert terms["smooth"].item() == 0.0


def test_stereo_objective_gradient(gen):
    left, right, d1 = _scene(gen)
    w = LossWeights()

    def f(d):
        t = stereo_terms(left, right, d1, d, w)
        return total_objectives("stereo", w, t["rec"], t["smooth"], t["guide"])

    d = d1 + 0.37 * torch.rand(d1.shape, generator=gen, dtype=f64)
    assert finite_diff_check(f, d, eps=1e-6) < 1e-4


def test_warp_gradient_primitive(gen):
    img = torch.rand(1, 3, 16, 16, generator=gen, dtype=f64)
    d = torch.rand(1, 1, 16, 16, generator=gen, dtype=f64) * 3 + 0.2
    assert finite_diff_check(lambda x: (warp_horizontal(img, x)[0] ** 2).sum(), d, eps=1e-5) < 1e-6
