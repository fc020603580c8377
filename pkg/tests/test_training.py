import json
import math

import pytest
import torch

from infgen.decoder import DecoderConfig, InfGenDecoder
from infgen.features import FeaturePyramid, perceptual_loss
from infgen.latent_codec import VAE
from infgen.training import (LossBreakdown, LossLog, LossWeights, NonFiniteLossError, PatchDiscriminator,
                             StageConfig, Trainer, adversarial_losses, cosine_lr, generator_loss,
                             patchgan_discriminate, sample_training_batch, sample_training_pair,
                             total_generator_loss)

from oracles import finite_difference_check

STAGE = StageConfig(64, 256, 1, 10)


def test_pair_shapes():
    src = torch.rand(3, 300, 280) * 2 - 1
    for seed in range(20):
        pair = sample_training_pair(src, STAGE, 64, seed)
        assert pair.input_image.shape == (3, 64, 64)
        th, tw = pair.target_resolution
        assert 64 <= th <= 256 and 64 <= tw <= 256
        top, left, h, w = pair.crop_box
        assert torch.equal(pair.target_image, src[:, top:top + h, left:left + w])


def test_pair_seeded():
    src = torch.rand(3, 300, 300)
    a, b = sample_training_pair(src, STAGE, 64, 11), sample_training_pair(src, STAGE, 64, 11)
    assert a.crop_box == b.crop_box and torch.equal(a.input_image, b.input_image)


def test_pair_aspect_ratio_varies():
    src = torch.zeros(3, 256, 256)
    gen = torch.Generator().manual_seed(0)
    unequal = sum(len(set(sample_training_pair(src, STAGE, 64, gen).target_resolution)) == 2
                  for _ in range(1000))
    # P(t_h == t_w) = 1/193 for independent uniform draws on [64, 256]
    assert unequal / 1000 > 0.9


def test_pair_input_is_resized_crop():
    src = torch.rand(3, 128, 128) * 2 - 1
    pair = sample_training_pair(src, StageConfig(128, 128, 1, 1), 64, 0)
    expected = torch.nn.functional.interpolate(src[None], size=(64, 64), mode="bilinear",
                                               align_corners=False, antialias=True)[0]
    assert torch.allclose(pair.input_image, expected)


def test_pair_rejects_small_source():
    with pytest.raises(ValueError):
        sample_training_pair(torch.zeros(3, 50, 300), STAGE, 64, 0)


def test_batch_shares_target_size():
    gen = torch.Generator().manual_seed(0)
    srcs = [torch.rand(3, 200, 220) for _ in range(3)]
    inp, tgt = sample_training_batch(srcs, StageConfig(64, 128, 3, 1), 64, gen)
    assert inp.shape == (3, 3, 64, 64)
    assert 64 <= tgt.shape[-2] <= 128 and 64 <= tgt.shape[-1] <= 128


@pytest.fixture(scope="module")
def features():
    return FeaturePyramid()


def test_perceptual_identity_and_symmetry(features):
    gen = torch.Generator().manual_seed(0)
    for _ in range(5):
        x = torch.rand(2, 3, 32, 48, generator=gen) * 2 - 1
        y = torch.rand(2, 3, 32, 48, generator=gen) * 2 - 1
        assert perceptual_loss(x, x, features).item() == 0
        a, b = perceptual_loss(x, y, features).item(), perceptual_loss(y, x, features).item()
        assert a > 0 and abs(a - b) < 1e-6


def test_perceptual_shape_mismatch(features):
    with pytest.raises(ValueError):
        perceptual_loss(torch.zeros(1, 3, 32, 32), torch.zeros(1, 3, 32, 40), features)


def test_feature_pyramid_frozen_and_reproducible(features):
    assert not any(p.requires_grad for p in features.parameters())
    other = FeaturePyramid()
    for a, b in zip(features.parameters(), other.parameters()):
        assert torch.equal(a, b)


@pytest.mark.parametrize("hw,logits", [((64, 64), (8, 8)), ((128, 96), (16, 12)), ((16, 16), (2, 2))])
def test_discriminator_logit_map(hw, logits):
    d = PatchDiscriminator()
    assert patchgan_discriminate(d, torch.zeros(1, 3, *hw)).shape == (1, 1, *logits)


def test_discriminator_zero_weights():
    d = PatchDiscriminator()
    with torch.no_grad():
        for p in d.parameters():
            p.zero_()
    assert torch.equal(d(torch.rand(2, 3, 64, 64)), torch.zeros(2, 1, 8, 8))


def test_discriminator_too_small():
    with pytest.raises(ValueError):
        PatchDiscriminator()(torch.zeros(1, 3, 8, 64))


@pytest.mark.parametrize("real,fake,g,d", [(1.0, -1.0, 1.0, 0.0), (0.0, 0.0, 0.0, 2.0), (3.0, 0.0, 0.0, 1.0)])
def test_hinge_losses(real, fake, g, d):
    g_loss, d_loss = adversarial_losses(torch.full((1, 1, 4, 4), real), torch.full((1, 1, 4, 4), fake))
    assert g_loss.item() == g and d_loss.item() == d


def test_loss_breakdown_arithmetic():
    parts = LossBreakdown(l1=1.0, perceptual=0.5, adversarial_g=0.2, total=1.07, discriminator=0.0,
                          lambda_p=0.1, lambda_g=0.1)
    assert parts.identity_error() < 1e-12


def test_default_loss_weights():
    assert LossWeights() == LossWeights(0.1, 0.1)


def test_generator_loss_zero_on_perfect_reconstruction(features):
    d = PatchDiscriminator()
    with torch.no_grad():
        for p in d.parameters():
            p.zero_()
    x = torch.rand(1, 3, 32, 32) * 2 - 1
    parts = total_generator_loss(x, x.clone(), LossWeights(), features, d)
    assert parts.total == 0 and parts.l1 == 0 and parts.perceptual == 0


def test_generator_loss_identity_and_bound(features):
    d = PatchDiscriminator()
    gen = torch.Generator().manual_seed(3)
    for _ in range(5):
        x = torch.rand(2, 3, 32, 32, generator=gen) * 2 - 1
        y = torch.rand(2, 3, 32, 32, generator=gen) * 2 - 1
        total, parts = generator_loss(x, y, LossWeights(), features, d)
        assert parts.identity_error() < 1e-9
        assert total.item() == parts.total
        if parts.adversarial_g >= 0:
            assert parts.total >= parts.l1


def tiny_models(dtype=torch.float64):
    torch.manual_seed(0)
    cfg = DecoderConfig(d_model=16, blocks=1, heads=2, fourier_m=4, head_channels=8)
    dec = InfGenDecoder(cfg, generator=torch.Generator().manual_seed(0)).to(dtype)
    vae = VAE(4, 8).to(dtype)
    return vae, dec, PatchDiscriminator(8).to(dtype), FeaturePyramid().to(dtype)


def test_generator_gradient_check():
    vae, dec, disc, feats = tiny_models()
    x = torch.rand(1, 3, 32, 32, dtype=torch.float64) * 2 - 1
    z = vae.encode(x).mu.detach()

    def loss():
        return generator_loss(x, dec(z, (32, 32)), LossWeights(0.1, 0.0), feats, None)[0]

    worst, rows = finite_difference_check(loss, dec, n=10, seed=4)
    assert worst < 1e-3, rows


def test_train_step_keeps_encoder_frozen():
    vae, dec, disc, feats = tiny_models(torch.float32)
    tr = Trainer(vae.encoder, dec, disc, feats, adv_warmup=0, total_steps=10)
    probe = torch.rand(1, 3, 32, 32) * 2 - 1
    before = vae.encode(probe).mu.clone()
    state = {k: v.clone() for k, v in vae.encoder.state_dict().items()}
    dec_before = [p.clone() for p in dec.parameters()]
    for _ in range(3):
        parts = tr.train_step(torch.rand(2, 3, 32, 32) * 2 - 1, torch.rand(2, 3, 40, 24) * 2 - 1)
        assert parts.identity_error() < 1e-9
        assert parts.discriminator > 0
    for k, v in vae.encoder.state_dict().items():
        assert torch.equal(v, state[k])
    assert torch.equal(vae.encode(probe).mu, before)
    assert any(not torch.equal(a, b) for a, b in zip(dec_before, dec.parameters()))


def test_adversarial_warmup():
    vae, dec, disc, feats = tiny_models(torch.float32)
    tr = Trainer(vae.encoder, dec, disc, feats, adv_warmup=2, total_steps=10)
    x = torch.rand(1, 3, 32, 32) * 2 - 1
    lams = [tr.train_step(x, x).lambda_g for _ in range(4)]
    assert lams == [0.0, 0.0, 0.1, 0.1]


def test_non_finite_loss_rejected():
    vae, dec, disc, feats = tiny_models(torch.float32)
    tr = Trainer(vae.encoder, dec, disc, feats, adv_warmup=100, total_steps=10)
    with torch.no_grad():
        dec.head.conv_out.bias.fill_(float("nan"))
    snapshot = [p.clone() for p in dec.parameters()]
    with pytest.raises(NonFiniteLossError):
        tr.train_step(torch.zeros(1, 3, 32, 32), torch.zeros(1, 3, 32, 32))
    for a, b in zip(snapshot, dec.parameters()):
        assert torch.equal(a, b) or (a.isnan().any() and b.isnan().any())


def test_cosine_schedule():
    assert cosine_lr(0, 100, 2e-4, 1e-5) == pytest.approx(2e-4)
    assert cosine_lr(99, 100, 2e-4, 1e-5) == pytest.approx(1e-5)
    assert cosine_lr(500, 100, 2e-4, 1e-5) == pytest.approx(1e-5)
    mid = cosine_lr(50, 101, 2e-4, 1e-5)
    assert mid == pytest.approx((2e-4 + 1e-5) / 2)
    lrs = [cosine_lr(s, 100, 2e-4, 1e-5) for s in range(100)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_discriminator_only_training_decreases_loss():
    torch.manual_seed(0)
    disc = PatchDiscriminator()
    opt = torch.optim.AdamW(disc.parameters(), lr=2e-5, betas=(0.5, 0.9))
    gen = torch.Generator().manual_seed(0)
    real = torch.rand(4, 3, 32, 32, generator=gen) * 2 - 1
    fake = (torch.rand(4, 3, 32, 32, generator=gen) * 2 - 1) * 0.3
    losses = []
    for _ in range(150):
        _, d_loss = adversarial_losses(disc(real), disc(fake))
        opt.zero_grad()
        d_loss.backward()
        opt.step()
        losses.append(d_loss.item())
    windows = [sum(losses[i:i + 50]) / 50 for i in range(0, 150, 50)]
    assert windows[0] > windows[1] > windows[2]


def test_loss_log_roundtrip_and_truncation(tmp_path):
    path = tmp_path / "loss.jsonl"
    log = LossLog(path)
    parts = LossBreakdown(1.0, 0.5, 0.2, 1.07, 1.5, 0.1, 0.1)
    for step in range(3):
        log.write(step, 2e-4, parts)
    with path.open("a") as f:
        f.write('{"step": 3, "lr"')  # crash mid-line
    recs = LossLog.read(path)
    assert [r["step"] for r in recs] == [0, 1, 2]
    assert set(recs[0]) == {"step", "lr", "l1", "perceptual", "adversarial_g", "discriminator", "total"}
    assert json.loads(path.read_text().splitlines()[0])["total"] == 1.07
