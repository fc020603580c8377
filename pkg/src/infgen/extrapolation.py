"""Training-free resolution extrapolation.

Decode, re-encode the result, decode again at a larger scale, and repeat
until the target is reached.  Each step scales height and width by at most
`cap` relative to the current resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import torch

from .decoder import InfGenDecoder
from .latent_codec import Encoder, encode

_EPS = 1e-9


@dataclass
class ExtrapolationPlan:
    base_h: int
    base_w: int
    steps: list[tuple[float, float]] = field(default_factory=list)
    cap: float = 2.0
    target_h: int | None = None
    target_w: int | None = None

    def __post_init__(self):
        for sh, sw in self.steps:
            for s in (sh, sw):
                if not (1 - _EPS < s <= self.cap + _EPS):
                    raise ValueError(f"step factor {s} outside [1, {self.cap}]")
        if self.target_h is None:
            self.target_h = round(self.base_h * self.total_scale()[0])
        if self.target_w is None:
            self.target_w = round(self.base_w * self.total_scale()[1])

    def total_scale(self) -> tuple[float, float]:
        ph = pw = 1.0
        for sh, sw in self.steps:
            ph *= sh
            pw *= sw
        return ph, pw

    def resolutions(self) -> list[tuple[int, int]]:
        """Output size of every step.

        Intermediates are rounded to the nearest multiple of 8 (so they can be
        re-encoded); the last step lands on the exact target.
        """
        out = []
        h, w = self.base_h, self.base_w
        for i, (sh, sw) in enumerate(self.steps):
            if i == len(self.steps) - 1:
                h, w = self.target_h, self.target_w
            else:
                h = max(8, 8 * round(h * sh / 8))
                w = max(8, 8 * round(w * sw / 8))
            out.append((h, w))
        return out

    def describe(self) -> str:
        steps = ", ".join(f"({sh:g}, {sw:g})" for sh, sw in self.steps)
        return f"base {self.base_h}x{self.base_w} -> {self.target_h}x{self.target_w}, steps [{steps}]"


def plan_schedule(base: tuple[int, int], target: tuple[int, int], cap: float = 2.0) -> ExtrapolationPlan:
    """Greedy per-axis plan: every step takes min(cap, remaining ratio)."""
    if cap <= 1:
        raise ValueError(f"cap must exceed 1, got {cap}")
    (bh, bw), (th, tw) = base, target
    if th < bh or tw < bw:
        raise ValueError(f"target {th}x{tw} below base {bh}x{bw}")

    def axis(ratio):
        factors = []
        while ratio > 1 + _EPS:
            f = min(cap, ratio)
            factors.append(f)
            ratio /= f
        return factors

    fh, fw = axis(th / bh), axis(tw / bw)
    n = max(len(fh), len(fw))
    fh += [1.0] * (n - len(fh))
    fw += [1.0] * (n - len(fw))
    return ExtrapolationPlan(bh, bw, list(zip(fh, fw)), cap, th, tw)


@dataclass(frozen=True)
class ScaleLimits:
    latent_size: tuple[int, int]
    training_range: tuple[int, int]
    reliable_range: tuple[int, int]
    max_total_scale: float  # area factor, s_h * s_w accumulated over the plan

    def __post_init__(self):
        if not (self.reliable_range[0] <= self.training_range[0]
                and self.training_range[1] <= self.reliable_range[1]):
            raise ValueError("reliable range must contain the training range")
        if self.max_total_scale < 1:
            raise ValueError("max_total_scale must be >= 1")


# Recommended rows at full scale (latent side, training range, reliable range, max area scale).
RECOMMENDED_LIMITS = [
    ScaleLimits((32, 32), (256, 512), (256, 1024), 16.0),
    ScaleLimits((64, 64), (512, 1024), (512, 2048), 16.0),
    ScaleLimits((64, 64), (512, 2048), (512, 4096), 64.0),
]

# Desk analog: 8x8 latent, stage-2 training range.
DESK_LIMITS = ScaleLimits((8, 8), (64, 256), (64, 512), 64.0)


def validate_against_limits(plan: ExtrapolationPlan, limits: ScaleLimits) -> list[str]:
    """Warnings for steps outside the reliable envelope; never raises."""
    warnings = []
    ph = pw = 1.0
    lo, hi = limits.reliable_range
    for i, ((sh, sw), (h, w)) in enumerate(zip(plan.steps, plan.resolutions()), start=1):
        ph *= sh
        pw *= sw
        if not (lo <= h <= hi and lo <= w <= hi):
            warnings.append(f"step {i}: resolution {h}x{w} outside reliable range [{lo}, {hi}]")
        if ph * pw > limits.max_total_scale * (1 + _EPS):
            warnings.append(f"step {i}: cumulative scale {ph * pw:g}x exceeds {limits.max_total_scale:g}x")
    return warnings


@torch.inference_mode()
def run_extrapolation(z0: torch.Tensor, plan: ExtrapolationPlan, encoder: Encoder, decoder: InfGenDecoder,
                      on_step: Callable[[int, torch.Tensor], None] | None = None) -> torch.Tensor:
    """Iterate decode -> encode(mean) -> decode along the plan.

    The first step decodes `z0` directly; later steps re-encode the previous
    image with the encoder mean (no sampling).  `on_step(n, image)` receives
    every intermediate.
    """
    max_res = decoder.cfg.max_res
    sizes = plan.resolutions()
    for h, w in sizes:
        if h > max_res or w > max_res:
            raise ValueError(f"plan reaches {h}x{w}, above max_res {max_res}")
    if not plan.steps:
        return decoder(z0, (plan.base_h, plan.base_w))
    image = None
    for n, size in enumerate(sizes, start=1):
        z = z0 if n == 1 else encode(encoder, image).mu
        image = decoder(z, size)
        if on_step is not None:
            on_step(n, image)
    return image
