"""Reconstruction and distribution metrics.

Images are (3, H, W) or (B, 3, H, W) tensors in [-1, 1]; PSNR and SSIM
remap them to [0, 1] first.  The Frechet distance uses the frozen random
feature pyramid instead of Inception, so values are only meaningful
relative to each other (reported as rFD).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .features import FeaturePyramid

PSNR_CAP = 100.0


def _unit(x: torch.Tensor) -> torch.Tensor:
    return (x.double() + 1.0) / 2.0


def psnr_from_mse(mse: float) -> float:
    if mse < 1e-10:
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)


def psnr(x: torch.Tensor, y: torch.Tensor) -> float:
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    mse = (_unit(x) - _unit(y)).pow(2).mean().item()
    return psnr_from_mse(mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    r = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(r ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(x: torch.Tensor, y: torch.Tensor, win_size: int = 11, sigma: float = 1.5) -> float:
    """Mean local SSIM on the channel-mean grayscale image (valid windows only)."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    if min(x.shape[-2:]) < win_size:
        raise ValueError(f"image {tuple(x.shape[-2:])} smaller than the {win_size}x{win_size} window")
    gx = _unit(x).mean(dim=-3).reshape(-1, 1, *x.shape[-2:])
    gy = _unit(y).mean(dim=-3).reshape(-1, 1, *y.shape[-2:])
    win = gaussian_window(win_size, sigma)[None, None]
    c1, c2 = 0.01 ** 2, 0.03 ** 2

    def filt(a):
        return F.conv2d(a, win)

    mx, my = filt(gx), filt(gy)
    vx = filt(gx * gx) - mx * mx
    vy = filt(gy * gy) - my * my
    cxy = filt(gx * gy) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return s.mean().item()


def crop_patches(x: torch.Tensor, patch: int = 32, stride: int | None = None) -> list[torch.Tensor]:
    """Tile a (3, H, W) image into patch x patch crops anchored at the top-left.

    Non-overlapping by default; a smaller `stride` gives overlapping tiles.
    """
    stride = stride or patch
    H, W = x.shape[-2:]
    if H < patch or W < patch:
        raise ValueError(f"image {H}x{W} smaller than patch {patch}")
    return [x[..., i:i + patch, j:j + patch]
            for i in range(0, H - patch + 1, stride)
            for j in range(0, W - patch + 1, stride)]


@dataclass
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    @classmethod
    def from_features(cls, feats) -> "FeatureStats":
        f = np.asarray(feats, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] < 2:
            raise ValueError("need a (n >= 2, d) feature matrix")
        return cls(f.mean(axis=0), np.cov(f, rowvar=False).reshape(f.shape[1], f.shape[1]), f.shape[0])

    def merge(self, other: "FeatureStats") -> "FeatureStats":
        """Combine stats of two disjoint sample sets (unbiased covariance)."""
        if self.mean.shape != other.mean.shape:
            raise ValueError("feature dimension mismatch")
        n = self.n + other.n
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.n / n)
        m2 = self.cov * (self.n - 1) + other.cov * (other.n - 1) + np.outer(delta, delta) * (self.n * other.n / n)
        return FeatureStats(mean, m2 / (n - 1), n)


def _sqrt_trace_product(a: np.ndarray, b: np.ndarray, tol: float = 1e-6) -> float:
    """Tr((A B)^(1/2)) for PSD A, B via the symmetric form A^(1/2) B A^(1/2)."""
    wa, va = np.linalg.eigh((a + a.T) / 2)
    if wa.min() < -tol:
        raise np.linalg.LinAlgError(f"covariance not PSD (eigenvalue {wa.min():.3g})")
    sa = (va * np.sqrt(np.clip(wa, 0, None))) @ va.T
    m = sa @ b @ sa
    w = np.linalg.eigvalsh((m + m.T) / 2)
    if w.min() < -tol * max(1.0, abs(w).max()):
        raise np.linalg.LinAlgError(f"matrix square root failed (eigenvalue {w.min():.3g})")
    return float(np.sqrt(np.clip(w, 0, None)).sum())


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"feature dimension mismatch {a.mean.shape} vs {b.mean.shape}")
    diff = a.mean - b.mean
    tr = np.trace(a.cov) + np.trace(b.cov) - 2 * _sqrt_trace_product(a.cov, b.cov)
    return float(max(diff @ diff + tr, 0.0))


@torch.no_grad()
def patch_features(images, extractor: FeaturePyramid, patch: int = 32, spatial: bool = False) -> np.ndarray:
    rows = []
    for img in images:
        crops = torch.stack(crop_patches(img, patch))
        f = extractor.spatial(crops.float()) if spatial else extractor.pooled(crops.float())
        rows.append(f.double().numpy())
    return np.concatenate(rows)


def patch_frechet(real, fake, extractor: FeaturePyramid, patch: int = 32, spatial: bool = False) -> float:
    """rFD_p (or its spatial variant): Frechet distance over patch features."""
    fa = FeatureStats.from_features(patch_features(real, extractor, patch, spatial))
    fb = FeatureStats.from_features(patch_features(fake, extractor, patch, spatial))
    return frechet_distance(fa, fb)
