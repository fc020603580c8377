import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from infgen.latent_codec import (VAE, DivergenceError, GaussianLatent, encode, kl_divergence,
                                 reparameterize, vae_loss, vae_pretrain_step)

from oracles import finite_difference_check


@pytest.fixture(scope="module")
def vae():
    torch.manual_seed(0)
    return VAE(latent_channels=4, ch=8)


@pytest.mark.parametrize("h,w", [(64, 64), (128, 96), (16, 8), (8, 40)])
def test_encode_shape(vae, h, w):
    g = vae.encode(torch.zeros(1, 3, h, w))
    assert g.mu.shape == g.logvar.shape == (1, 4, h // 8, w // 8)


def test_encode_deterministic(vae):
    x = torch.rand(2, 3, 64, 64) * 2 - 1
    a, b = vae.encode(x), vae.encode(x)
    assert torch.equal(a.mu, b.mu) and torch.equal(a.logvar, b.logvar)


def test_encode_rejects_bad_input(vae):
    with pytest.raises(ValueError):
        vae.encode(torch.zeros(1, 3, 60, 64))
    x = torch.zeros(1, 3, 64, 64)
    x[0, 0, 0, 0] = float("nan")
    with pytest.raises(ValueError):
        vae.encode(x)


def test_logvar_clamped(vae):
    with torch.no_grad():
        vae.encoder.conv_out.bias[4:] = 1e3
    try:
        g = vae.encode(torch.zeros(1, 3, 16, 16))
        assert g.logvar.max() <= 20
    finally:
        with torch.no_grad():
            vae.encoder.conv_out.bias[4:] = 0


def test_reparameterize_vanishing_variance():
    mu = torch.randn(1, 4, 8, 8, dtype=torch.float64)
    z = reparameterize(GaussianLatent(mu, torch.full_like(mu, -30.0)), 3)
    assert (z - mu).abs().max() < 1e-6


def test_reparameterize_seeded():
    g = GaussianLatent(torch.zeros(1, 4, 2, 2), torch.zeros(1, 4, 2, 2))
    assert torch.equal(reparameterize(g, 7), reparameterize(g, 7))
    assert not torch.equal(reparameterize(g, 7), reparameterize(g, 8))


def test_reparameterize_monte_carlo_mean():
    g = GaussianLatent(torch.full((10000, 1, 1, 1), 0.7, dtype=torch.float64),
                       torch.zeros(10000, 1, 1, 1, dtype=torch.float64))
    z = reparameterize(g, 0)
    assert abs(z.mean().item() - 0.7) < 0.03
    assert abs(z.std().item() - 1.0) < 0.03


@pytest.mark.parametrize("mu,logvar,expected", [
    (0.0, 0.0, 0.0),
    (1.0, 0.0, 0.5),
    (0.0, math.log(4), 0.5 * (4 - 1 - math.log(4))),
])
def test_kl_cases(mu, logvar, expected):
    g = GaussianLatent(torch.tensor([mu], dtype=torch.float64), torch.tensor([logvar], dtype=torch.float64))
    assert kl_divergence(g).item() == pytest.approx(expected, abs=1e-12)


def test_kl_log4_value():
    g = GaussianLatent(torch.zeros(1, dtype=torch.float64), torch.full((1,), math.log(4), dtype=torch.float64))
    assert kl_divergence(g).item() == pytest.approx(0.8069, abs=1e-4)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-10, 10)), min_size=1, max_size=8))
def test_kl_nonnegative(pairs):
    mu = torch.tensor([p[0] for p in pairs], dtype=torch.float64)
    lv = torch.tensor([p[1] for p in pairs], dtype=torch.float64)
    kl = kl_divergence(GaussianLatent(mu, lv)).item()
    assert kl >= 0
    if mu.abs().max() > 1e-6 or lv.abs().max() > 1e-6:
        assert kl > 0


def test_zero_init_smoke():
    vae = VAE(4, 8)
    with torch.no_grad():
        for p in vae.parameters():
            p.zero_()
    before = [p.clone() for p in vae.parameters()]
    opt = torch.optim.AdamW(vae.parameters(), lr=1e-3)
    parts = vae_pretrain_step(vae, opt, torch.full((2, 3, 16, 16), 0.25), beta=1e-4,
                              generator=torch.Generator().manual_seed(0))
    assert all(math.isfinite(v) for v in parts.values())
    assert any(not torch.equal(a, b) for a, b in zip(before, vae.parameters()))


def test_pretrain_gradient_matches_finite_differences():
    torch.manual_seed(1)
    vae = VAE(2, 8).double()
    x = (torch.rand(2, 3, 16, 16, dtype=torch.float64) * 2 - 1)

    def loss():
        # fixed noise so the objective is a deterministic function of the parameters
        return vae_loss(vae, x, 1e-4, torch.Generator().manual_seed(5))[0]

    worst, rows = finite_difference_check(loss, vae, n=10, seed=2)
    assert worst < 1e-3, rows


def test_divergence_reported():
    vae = VAE(4, 8)
    opt = torch.optim.AdamW(vae.parameters())
    with torch.no_grad():
        vae.decoder.conv_out.bias.fill_(float("nan"))
    with pytest.raises(DivergenceError):
        vae_pretrain_step(vae, opt, torch.zeros(1, 3, 16, 16))


@pytest.mark.slow
def test_overfit_single_image():
    torch.manual_seed(0)
    vae = VAE(4, 16)
    from infgen.data import synthetic_images
    x = synthetic_images(1, 64, seed=3)[0][None]
    opt = torch.optim.AdamW(vae.parameters(), lr=1e-3)
    gen = torch.Generator().manual_seed(0)
    first = vae_pretrain_step(vae, opt, x, beta=0.0, generator=gen)["l1"]
    for _ in range(499):
        last = vae_pretrain_step(vae, opt, x, beta=0.0, generator=gen)["l1"]
    assert last <= 0.5 * first
