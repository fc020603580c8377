"""Frozen random conv pyramid.

Stands in for pretrained perceptual networks: the same weights drive the
perceptual loss and the Frechet feature distance.  Weights come from a fixed
seed so every run sees the identical extractor.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

FEATURE_SEED = 1234


class FeaturePyramid(nn.Module):
    def __init__(self, channels=(16, 32, 64), seed: int = FEATURE_SEED):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.convs = nn.ModuleList()
        c_in = 3
        for c in channels:
            conv = nn.Conv2d(c_in, c, 3, stride=2, padding=1)
            fan_in = c_in * 9
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                conv.bias.zero_()
            self.convs.append(conv)
            c_in = c
        self.out_dim = channels[-1]
        self.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Raw activations of every stage."""
        feats = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
            feats.append(x)
        return feats

    def pooled(self, x: torch.Tensor) -> torch.Tensor:
        """Global-average-pooled last stage, (B, out_dim)."""
        return self(x)[-1].mean(dim=(-2, -1))

    def spatial(self, x: torch.Tensor, channels: int = 7, grid: int = 4) -> torch.Tensor:
        """Leading channels of the middle stage pooled to a fixed grid, flattened."""
        f = self(x)[1][:, :channels]
        return F.adaptive_avg_pool2d(f, grid).flatten(1)


def normalize_channels(f: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    return f / torch.sqrt(f.pow(2).sum(dim=1, keepdim=True) + eps)


def perceptual_loss(x: torch.Tensor, x_hat: torch.Tensor, features: FeaturePyramid) -> torch.Tensor:
    """Mean squared distance between channel-normalized activations, averaged over stages."""
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    fx, fy = features(x), features(x_hat)
    dists = [(normalize_channels(a) - normalize_channels(b)).pow(2).sum(dim=1).mean() for a, b in zip(fx, fy)]
    return torch.stack(dists).mean()
