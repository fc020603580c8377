"""Adversarial training of the arbitrary-resolution decoder.

Generator objective: L1 + lambda_p * perceptual + lambda_g * hinge-GAN,
with a PatchGAN discriminator and a frozen encoder feeding latents.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .decoder import InfGenDecoder
from .features import FeaturePyramid, perceptual_loss
from .latent_codec import DivergenceError, Encoder, encode, reparameterize


@dataclass(frozen=True)
class LossWeights:
    lambda_p: float = 0.1
    lambda_g: float = 0.1

    def __post_init__(self):
        if self.lambda_p < 0 or self.lambda_g < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    l1: float
    perceptual: float
    adversarial_g: float
    total: float
    discriminator: float
    lambda_p: float
    lambda_g: float

    def identity_error(self) -> float:
        return abs(self.total - (self.l1 + self.lambda_p * self.perceptual + self.lambda_g * self.adversarial_g))


@dataclass(frozen=True)
class StageConfig:
    min_size: int
    max_size: int
    batch_size: int
    steps: int

    def __post_init__(self):
        if not 8 <= self.min_size <= self.max_size:
            raise ValueError(f"bad stage range [{self.min_size}, {self.max_size}]")


@dataclass
class TrainingPair:
    input_image: torch.Tensor   # (3, S_in, S_in)
    target_image: torch.Tensor  # (3, t_h, t_w)
    crop_box: tuple[int, int, int, int]  # top, left, t_h, t_w

    @property
    def target_resolution(self) -> tuple[int, int]:
        return tuple(self.target_image.shape[-2:])


def resize(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if tuple(x.shape[-2:]) != tuple(size):
        x = F.interpolate(x, size=size, mode="bilinear", align_corners=False, antialias=True)
    return x[0] if squeeze else x


def draw_target_size(stage: StageConfig, source_hw, generator: torch.Generator) -> tuple[int, int]:
    H, W = source_hw
    if H < stage.min_size or W < stage.min_size:
        raise ValueError(f"source {H}x{W} smaller than stage minimum {stage.min_size}")
    hi_h = min(stage.max_size, H)
    hi_w = min(stage.max_size, W)
    t_h = int(torch.randint(stage.min_size, hi_h + 1, (1,), generator=generator))
    t_w = int(torch.randint(stage.min_size, hi_w + 1, (1,), generator=generator))
    return t_h, t_w


def crop_pair(source: torch.Tensor, t_h: int, t_w: int, input_size: int,
              generator: torch.Generator) -> TrainingPair:
    H, W = source.shape[-2:]
    top = int(torch.randint(0, H - t_h + 1, (1,), generator=generator))
    left = int(torch.randint(0, W - t_w + 1, (1,), generator=generator))
    target = source[:, top:top + t_h, left:left + t_w]
    return TrainingPair(resize(target, (input_size, input_size)), target, (top, left, t_h, t_w))


def sample_training_pair(source: torch.Tensor, stage: StageConfig, input_size: int,
                         generator: torch.Generator | int) -> TrainingPair:
    """Random crop with independently drawn height/width; input is the crop resized square."""
    if isinstance(generator, int):
        generator = torch.Generator().manual_seed(generator)
    t_h, t_w = draw_target_size(stage, source.shape[-2:], generator)
    return crop_pair(source, t_h, t_w, input_size, generator)


def sample_training_batch(sources: list[torch.Tensor], stage: StageConfig, input_size: int,
                          generator: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """One target size per batch, one crop window per image."""
    min_h = min(s.shape[-2] for s in sources)
    min_w = min(s.shape[-1] for s in sources)
    t_h, t_w = draw_target_size(stage, (min_h, min_w), generator)
    pairs = [crop_pair(s, t_h, t_w, input_size, generator) for s in sources]
    return (torch.stack([p.input_image for p in pairs]), torch.stack([p.target_image for p in pairs]))


class PatchDiscriminator(nn.Module):
    """Three stride-2 convs and a 1-channel 3x3 head: one logit per 8x8 cell."""

    MIN_SIZE = 16

    def __init__(self, ch: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, ch, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(ch, ch * 2, 4, stride=2, padding=1),
            nn.GroupNorm(8, ch * 2),
            nn.LeakyReLU(0.2),
            nn.Conv2d(ch * 2, ch * 4, 4, stride=2, padding=1),
            nn.GroupNorm(8, ch * 4),
            nn.LeakyReLU(0.2),
            nn.Conv2d(ch * 4, 1, 3, padding=1),
        )

    def forward(self, x):
        if min(x.shape[-2:]) < self.MIN_SIZE:
            raise ValueError(f"image {tuple(x.shape[-2:])} below discriminator minimum {self.MIN_SIZE}")
        return self.net(x)


def patchgan_discriminate(disc: PatchDiscriminator, x: torch.Tensor) -> torch.Tensor:
    return disc(x)


def adversarial_losses(real_logits: torch.Tensor, fake_logits: torch.Tensor):
    """Hinge losses, returns (g_loss, d_loss)."""
    d_loss = F.relu(1.0 - real_logits).mean() + F.relu(1.0 + fake_logits).mean()
    g_loss = -fake_logits.mean()
    return g_loss, d_loss


def generator_loss(x, x_hat, weights: LossWeights, features: FeaturePyramid,
                   disc: PatchDiscriminator | None, lambda_g: float | None = None):
    """Returns (differentiable total, LossBreakdown).

    The total is accumulated in float64 so the logged breakdown satisfies
    the weighted-sum identity to rounding.  `lambda_g` overrides the
    adversarial weight (used for warmup); `disc=None` drops the term.
    """
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    lg = weights.lambda_g if lambda_g is None else lambda_g
    l1 = (x_hat - x).abs().mean()
    perc = perceptual_loss(x, x_hat, features)
    if disc is not None:
        adv = -disc(x_hat).mean()
    else:
        adv = torch.zeros((), dtype=x.dtype)
    total = l1.double() + weights.lambda_p * perc.double() + lg * adv.double()
    parts = LossBreakdown(
        l1=l1.item(), perceptual=perc.item(), adversarial_g=adv.item(), total=total.item(),
        discriminator=0.0, lambda_p=weights.lambda_p, lambda_g=lg,
    )
    return total, parts


def total_generator_loss(x, x_hat, weights, features, disc) -> LossBreakdown:
    return generator_loss(x, x_hat, weights, features, disc)[1]


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float) -> float:
    if total_steps <= 1:
        return lr_max
    t = min(step, total_steps - 1) / (total_steps - 1)
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * t))


class NonFiniteLossError(DivergenceError):
    pass


class Trainer:
    """Alternating discriminator / generator updates with a frozen encoder."""

    def __init__(self, encoder: Encoder, decoder: InfGenDecoder, disc: PatchDiscriminator,
                 features: FeaturePyramid, weights: LossWeights = LossWeights(),
                 lr: float = 2e-4, lr_min: float = 1e-5, total_steps: int = 6000,
                 adv_warmup: int = 200, weight_decay: float = 0.01,
                 sample_latent: bool = True, seed: int = 0):
        self.encoder = encoder
        encoder.requires_grad_(False)
        encoder.eval()
        self.decoder = decoder
        self.disc = disc
        self.features = features
        self.weights = weights
        self.lr, self.lr_min, self.total_steps = lr, lr_min, total_steps
        self.adv_warmup = adv_warmup
        self.sample_latent = sample_latent
        self.opt_g = torch.optim.AdamW(decoder.parameters(), lr=lr, betas=(0.5, 0.9), weight_decay=weight_decay)
        self.opt_d = torch.optim.AdamW(disc.parameters(), lr=lr, betas=(0.5, 0.9), weight_decay=weight_decay)
        self.noise = torch.Generator().manual_seed(seed)
        self.step = 0

    def adversarial_active(self) -> bool:
        return self.weights.lambda_g > 0 and self.step >= self.adv_warmup

    def latents(self, inputs: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            g = encode(self.encoder, inputs)
            return reparameterize(g, self.noise) if self.sample_latent else g.mu

    def train_step(self, inputs: torch.Tensor, targets: torch.Tensor) -> LossBreakdown:
        lr = cosine_lr(self.step, self.total_steps, self.lr, self.lr_min)
        for opt in (self.opt_g, self.opt_d):
            for group in opt.param_groups:
                group["lr"] = lr
        self.decoder.train()
        self.disc.train()

        z = self.latents(inputs)
        x_hat = self.decoder(z, tuple(targets.shape[-2:]))

        adv_on = self.adversarial_active()
        if adv_on:
            g_fake, d_loss = adversarial_losses(self.disc(targets), self.disc(x_hat.detach()))
            if not torch.isfinite(d_loss):
                raise NonFiniteLossError(f"non-finite discriminator loss at step {self.step}")
            self.opt_d.zero_grad(set_to_none=True)
            d_loss.backward()
            self.opt_d.step()
            d_val = d_loss.item()
        else:
            d_val = 0.0

        total, parts = generator_loss(targets, x_hat, self.weights, self.features,
                                      self.disc if adv_on else None,
                                      lambda_g=self.weights.lambda_g if adv_on else 0.0)
        if not torch.isfinite(total):
            self.opt_g.zero_grad(set_to_none=True)
            raise NonFiniteLossError(f"non-finite generator loss at step {self.step}")
        self.opt_g.zero_grad(set_to_none=True)
        total.backward()
        self.opt_g.step()
        # discriminator grads from the generator pass are discarded
        self.disc.zero_grad(set_to_none=True)
        parts.discriminator = d_val
        self.step += 1
        self.last_lr = lr
        return parts


LOG_FIELDS = ("step", "lr", "l1", "perceptual", "adversarial_g", "discriminator", "total")


class LossLog:
    """Append-only JSON-lines loss log; each record is flushed as written."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, step: int, lr: float, parts: LossBreakdown, **extra):
        rec = {"step": step, "lr": lr}
        rec.update({k: v for k, v in asdict(parts).items() if k in LOG_FIELDS})
        rec.update(extra)
        with self.path.open("a") as f:
            f.write(json.dumps(rec) + "\n")
            f.flush()

    @staticmethod
    def read(path: str | Path) -> list[dict]:
        records = []
        for line in Path(path).read_text().splitlines():
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError:
                break  # truncated tail of a crashed run
        return records
