"""Arbitrary-resolution decoder.

A grid of mask tokens sized for the requested output queries the latent
tokens through cross-attention.  Both sides carry INPE position codes on
the query/key path.  A pixel-shuffle head then upsamples the token grid by
8 and center-crops to the exact target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .inpe import INPE


@dataclass
class DecoderConfig:
    latent_channels: int = 4
    d_model: int = 128
    blocks: int = 4
    heads: int = 4
    mlp_ratio: int = 2
    fourier_m: int = 64
    sigma_b: float = 10.0
    head_channels: int = 64
    self_attention: bool = False
    half_pixel: bool = False
    max_res: int = 256

    def __post_init__(self):
        if self.blocks < 1:
            raise ValueError("need at least one block")
        if self.d_model % self.heads:
            raise ValueError(f"heads ({self.heads}) must divide d_model ({self.d_model})")


def mask_grid_shape(h: int, w: int) -> tuple[int, int]:
    if h < 1 or w < 1:
        raise ValueError(f"target resolution must be positive, got {h}x{w}")
    return (math.ceil(h / 8), math.ceil(w / 8))


def scaled_dot_product_attention(q, k, v, heads: int, return_weights: bool = False):
    """Multi-head attention over (B, Nq, d) queries and (B, Nk, d) keys/values."""
    B, nq, d = q.shape
    nk = k.shape[1]
    if k.shape[-1] != d or v.shape[-1] != d or v.shape[1] != nk:
        raise ValueError(f"dimension mismatch q{tuple(q.shape)} k{tuple(k.shape)} v{tuple(v.shape)}")
    dh = d // heads
    q = q.view(B, nq, heads, dh).transpose(1, 2)
    k = k.view(B, nk, heads, dh).transpose(1, 2)
    v = v.view(B, nk, heads, dh).transpose(1, 2)
    scores = q @ k.transpose(-2, -1) / math.sqrt(dh)
    weights = scores.softmax(dim=-1)
    out = (weights @ v).transpose(1, 2).reshape(B, nq, d)
    return (out, weights) if return_weights else out


class CrossAttentionBlock(nn.Module):
    """Pre-norm cross-attention + MLP, each with a residual connection.

    Position codes are added to the normalized features before the query and
    key projections only; values carry no positional term.
    """

    def __init__(self, d_model: int, heads: int, mlp_ratio: int = 2, self_attention: bool = False):
        super().__init__()
        self.heads = heads
        self.norm_q = nn.LayerNorm(d_model)
        self.norm_kv = nn.LayerNorm(d_model)
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.self_attn = None
        if self_attention:
            self.norm_sa = nn.LayerNorm(d_model)
            self.self_attn = nn.MultiheadAttention(d_model, heads, batch_first=True)
        self.norm_mlp = nn.LayerNorm(d_model)
        self.mlp = nn.Sequential(
            nn.Linear(d_model, mlp_ratio * d_model),
            nn.GELU(),
            nn.Linear(mlp_ratio * d_model, d_model),
        )

    def attend(self, x, x_pos, ctx, ctx_pos, return_weights: bool = False):
        hq = self.norm_q(x)
        hk = self.norm_kv(ctx)
        q = self.q_proj(hq + x_pos)
        k = self.k_proj(hk + ctx_pos)
        v = self.v_proj(hk)
        out, weights = scaled_dot_product_attention(q, k, v, self.heads, return_weights=True)
        out = self.out_proj(out)
        return (out, weights) if return_weights else out

    def forward(self, x, x_pos, ctx, ctx_pos):
        if x.shape[-1] != ctx.shape[-1]:
            raise ValueError(f"d_model mismatch: {x.shape[-1]} vs {ctx.shape[-1]}")
        if self.self_attn is not None:
            h = self.norm_sa(x) + x_pos
            x = x + self.self_attn(h, h, self.norm_sa(x), need_weights=False)[0]
        x = x + self.attend(x, x_pos, ctx, ctx_pos)
        return x + self.mlp(self.norm_mlp(x))


class UpsampleHead(nn.Module):
    """Three conv + pixel-shuffle x2 stages, then an RGB conv and tanh."""

    def __init__(self, d_model: int, ch: int = 64):
        super().__init__()
        chs = [d_model, ch, ch // 2, ch // 2]
        self.stages = nn.ModuleList()
        for i in range(3):
            self.stages.append(nn.Conv2d(chs[i], 4 * chs[i + 1], 3, padding=1))
        self.conv_out = nn.Conv2d(chs[-1], 3, 3, padding=1)

    def forward(self, feats, target_hw):
        h, w = target_hw
        gh, gw = feats.shape[-2:]
        if (gh, gw) != mask_grid_shape(h, w):
            raise ValueError(f"grid {gh}x{gw} inconsistent with target {h}x{w}")
        x = feats
        for i, conv in enumerate(self.stages):
            x = F.pixel_shuffle(conv(x), 2)
            x = F.silu(x)
        x = torch.tanh(self.conv_out(x))
        return center_crop(x, h, w)


def center_crop(x: torch.Tensor, h: int, w: int) -> torch.Tensor:
    H, W = x.shape[-2:]
    top = (H - h) // 2
    left = (W - w) // 2
    return x[..., top:top + h, left:left + w]


class InfGenDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig | None = None, generator: torch.Generator | None = None):
        super().__init__()
        cfg = cfg or DecoderConfig()
        self.cfg = cfg
        self.latent_proj = nn.Linear(cfg.latent_channels, cfg.d_model)
        self.mask_token = nn.Parameter(torch.randn(cfg.d_model, generator=generator) * 0.02)
        self.inpe = INPE(cfg.d_model, cfg.fourier_m, cfg.sigma_b, cfg.half_pixel, generator=generator)
        self.blocks = nn.ModuleList(
            CrossAttentionBlock(cfg.d_model, cfg.heads, cfg.mlp_ratio, cfg.self_attention)
            for _ in range(cfg.blocks)
        )
        self.norm_out = nn.LayerNorm(cfg.d_model)
        self.head = UpsampleHead(cfg.d_model, cfg.head_channels)

    def mask_tokens(self, h: int, w: int, batch: int = 1) -> torch.Tensor:
        gh, gw = mask_grid_shape(h, w)
        return self.mask_token.expand(batch, gh * gw, -1)

    def latent_tokens(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 4 or z.shape[1] != self.cfg.latent_channels:
            raise ValueError(
                f"latent must be (B, {self.cfg.latent_channels}, h, w), got {tuple(z.shape)}"
            )
        return self.latent_proj(z.flatten(2).transpose(1, 2))

    def tokens(self, z: torch.Tensor, h: int, w: int) -> torch.Tensor:
        """Run all blocks; returns the mask grid as (B, d_model, gh, gw)."""
        gh, gw = mask_grid_shape(h, w)
        ctx = self.latent_tokens(z)
        ctx_pos = self.inpe(z.shape[-2], z.shape[-1])
        x = self.mask_tokens(h, w, z.shape[0])
        x_pos = self.inpe(gh, gw)
        for blk in self.blocks:
            x = blk(x, x_pos, ctx, ctx_pos)
        x = self.norm_out(x)
        return x.transpose(1, 2).reshape(z.shape[0], -1, gh, gw)

    def forward(self, z: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
        h, w = int(size[0]), int(size[1])
        if not (1 <= h <= self.cfg.max_res and 1 <= w <= self.cfg.max_res):
            raise ValueError(f"target {h}x{w} outside [1, {self.cfg.max_res}]")
        return self.head(self.tokens(z, h, w), (h, w))


def decode(decoder: InfGenDecoder, z: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Single forward pass: latent (B, C, h_l, w_l) -> image (B, 3, h, w)."""
    return decoder(z, size)
