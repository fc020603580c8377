"""Small Gaussian VAE whose encoder is frozen and reused by the generator.

Images are (B, 3, H, W) tensors in [-1, 1].  The encoder reduces each
spatial side by 8 and emits per-position mean and log-variance maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

LOGVAR_MIN = -30.0
LOGVAR_MAX = 20.0


class DivergenceError(RuntimeError):
    """Raised when a loss turns non-finite; the optimizer step is skipped."""


@dataclass
class GaussianLatent:
    mu: torch.Tensor
    logvar: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.logvar.shape:
            raise ValueError(f"mu {tuple(self.mu.shape)} and logvar {tuple(self.logvar.shape)} differ")


def _groups(ch: int) -> int:
    for g in (8, 4, 2):
        if ch % g == 0:
            return g
    return 1


class ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(ch), ch)
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(ch), ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class Encoder(nn.Module):
    def __init__(self, latent_channels: int = 4, ch: int = 32):
        super().__init__()
        chs = [ch, ch * 2, ch * 2, ch * 4]
        self.conv_in = nn.Conv2d(3, chs[0], 3, padding=1)
        stages = []
        for i in range(3):
            stages += [ResBlock(chs[i]), nn.Conv2d(chs[i], chs[i + 1], 3, stride=2, padding=1)]
        self.down = nn.Sequential(*stages)
        self.mid = ResBlock(chs[-1])
        self.norm_out = nn.GroupNorm(_groups(chs[-1]), chs[-1])
        self.conv_out = nn.Conv2d(chs[-1], 2 * latent_channels, 3, padding=1)

    def forward(self, x):
        h = self.mid(self.down(self.conv_in(x)))
        return self.conv_out(F.silu(self.norm_out(h)))


class ConvDecoder(nn.Module):
    """Fixed-scale decoder used only to pretrain the encoder."""

    def __init__(self, latent_channels: int = 4, ch: int = 32):
        super().__init__()
        chs = [ch * 4, ch * 2, ch * 2, ch]
        self.conv_in = nn.Conv2d(latent_channels, chs[0], 3, padding=1)
        self.mid = ResBlock(chs[0])
        stages = []
        for i in range(3):
            stages += [nn.Upsample(scale_factor=2, mode="nearest"),
                       nn.Conv2d(chs[i], chs[i + 1], 3, padding=1), ResBlock(chs[i + 1])]
        self.up = nn.Sequential(*stages)
        self.norm_out = nn.GroupNorm(_groups(chs[-1]), chs[-1])
        self.conv_out = nn.Conv2d(chs[-1], 3, 3, padding=1)

    def forward(self, z):
        h = self.up(self.mid(self.conv_in(z)))
        return torch.tanh(self.conv_out(F.silu(self.norm_out(h))))


class VAE(nn.Module):
    def __init__(self, latent_channels: int = 4, ch: int = 32):
        super().__init__()
        self.latent_channels = latent_channels
        self.encoder = Encoder(latent_channels, ch)
        self.decoder = ConvDecoder(latent_channels, ch)

    def encode(self, x: torch.Tensor) -> GaussianLatent:
        return encode(self.encoder, x)

    def freeze_encoder(self):
        self.encoder.requires_grad_(False)
        self.encoder.eval()


def check_image(x: torch.Tensor):
    if x.ndim != 4 or x.shape[1] != 3:
        raise ValueError(f"expected (B, 3, H, W) image batch, got {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise ValueError("image contains non-finite pixels")


def encode(encoder: Encoder, x: torch.Tensor) -> GaussianLatent:
    check_image(x)
    h, w = x.shape[-2:]
    if h % 8 or w % 8:
        raise ValueError(f"image size {h}x{w} is not divisible by 8")
    out = encoder(x)
    mu, logvar = out.chunk(2, dim=1)
    return GaussianLatent(mu, logvar.clamp(LOGVAR_MIN, LOGVAR_MAX))


def reparameterize(g: GaussianLatent, generator: torch.Generator | int | None = None) -> torch.Tensor:
    """z = mu + exp(logvar / 2) * eps, eps drawn from `generator` (or a seed)."""
    if isinstance(generator, int):
        generator = torch.Generator().manual_seed(generator)
    eps = torch.randn(g.mu.shape, generator=generator, dtype=g.mu.dtype).to(g.mu.device)
    return g.mu + torch.exp(0.5 * g.logvar) * eps


def kl_divergence(g: GaussianLatent) -> torch.Tensor:
    """Elementwise-mean KL(N(mu, sigma^2) || N(0, 1))."""
    per_elem = g.mu.pow(2) + (torch.expm1(g.logvar) - g.logvar).clamp_min(0)
    return 0.5 * torch.mean(per_elem)


def vae_loss(vae: VAE, batch: torch.Tensor, beta: float, generator=None):
    g = vae.encode(batch)
    z = reparameterize(g, generator)
    recon = vae.decoder(z)
    l1 = (recon - batch).abs().mean()
    kl = kl_divergence(g)
    return l1 + beta * kl, {"l1": l1.item(), "kl": kl.item()}


def vae_pretrain_step(vae: VAE, optimizer: torch.optim.Optimizer, batch: torch.Tensor,
                      beta: float = 1e-4, generator=None) -> dict:
    """One L1 + beta * KL step on the VAE; returns the loss breakdown."""
    vae.train()
    loss, parts = vae_loss(vae, batch, beta, generator)
    if not torch.isfinite(loss):
        optimizer.zero_grad(set_to_none=True)
        raise DivergenceError(f"non-finite VAE loss ({loss.item()})")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    parts["total"] = loss.item()
    return parts
