"""Implicit neural positional embedding.

Token-grid coordinates are normalized to [0, 1), lifted onto the unit
sphere, expanded with random Fourier features and pushed through a small
MLP.  Because only the normalized position enters, grids of any size share
one embedding function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn


@dataclass(frozen=True)
class GridCoord:
    x: int
    y: int
    grid_w: int
    grid_h: int

    def __post_init__(self):
        if self.grid_w < 1 or self.grid_h < 1:
            raise ValueError(f"degenerate grid {self.grid_h}x{self.grid_w}")
        if not (0 <= self.x < self.grid_w and 0 <= self.y < self.grid_h):
            raise ValueError(f"coordinate ({self.x}, {self.y}) outside {self.grid_h}x{self.grid_w} grid")


def standardize_coords(c: GridCoord, half_pixel: bool = False) -> tuple[float, float]:
    """Map an integer grid coordinate to (x / W, y / H)."""
    off = 0.5 if half_pixel else 0.0
    return ((c.x + off) / c.grid_w, (c.y + off) / c.grid_h)


def grid_coords(grid_h: int, grid_w: int, half_pixel: bool = False, dtype=torch.float32) -> torch.Tensor:
    """Normalized (x_hat, y_hat) for every token of a grid, row-major, shape (grid_h * grid_w, 2)."""
    if grid_h < 1 or grid_w < 1:
        raise ValueError(f"degenerate grid {grid_h}x{grid_w}")
    off = 0.5 if half_pixel else 0.0
    ys = (torch.arange(grid_h, dtype=torch.float64) + off) / grid_h
    xs = (torch.arange(grid_w, dtype=torch.float64) + off) / grid_w
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([xx.reshape(-1), yy.reshape(-1)], dim=-1).to(dtype)


def sphere_map(coords: torch.Tensor) -> torch.Tensor:
    """(..., 2) normalized coords -> (..., 3) points on the unit sphere.

    Latitude is pi * y_hat, longitude 2 * pi * x_hat.  Every coordinate with
    y_hat = 0.5 lands on the pole (0, 0, 1).
    """
    x_hat, y_hat = coords[..., 0], coords[..., 1]
    lat = math.pi * y_hat
    lon = 2 * math.pi * x_hat
    return torch.stack(
        [torch.cos(lat) * torch.cos(lon), torch.cos(lat) * torch.sin(lon), torch.sin(lat)],
        dim=-1,
    )


def fourier_features(points: torch.Tensor, b_matrix: torch.Tensor) -> torch.Tensor:
    """[cos(B p), sin(B p)] for points (..., 3) and B (m, 3); output (..., 2m)."""
    if b_matrix.ndim != 2 or points.shape[-1] != b_matrix.shape[1]:
        raise ValueError(
            f"shape mismatch: points (..., {points.shape[-1]}) vs b_matrix {tuple(b_matrix.shape)}"
        )
    proj = points @ b_matrix.T
    return torch.cat([torch.cos(proj), torch.sin(proj)], dim=-1)


def sample_fourier_matrix(m: int, sigma_b: float, generator: torch.Generator | None = None) -> torch.Tensor:
    if m < 1:
        raise ValueError("m must be >= 1")
    return torch.randn(m, 3, generator=generator, dtype=torch.float64).mul_(sigma_b).float()


class INPE(nn.Module):
    """Coordinate -> embedding network shared by mask and latent tokens.

    The Fourier matrix is a buffer: it is saved with the module but never
    touched by the optimizer.
    """

    def __init__(self, d_model: int, m: int = 64, sigma_b: float = 10.0,
                 half_pixel: bool = False, generator: torch.Generator | None = None):
        super().__init__()
        self.d_model = d_model
        self.m = m
        self.sigma_b = sigma_b
        self.half_pixel = half_pixel
        self.register_buffer("b_matrix", sample_fourier_matrix(m, sigma_b, generator))
        self.mlp = nn.Sequential(
            nn.Linear(2 * m, d_model),
            nn.GELU(),
            nn.Linear(d_model, d_model),
            nn.GELU(),
            nn.Linear(d_model, d_model),
        )

    def embed_normalized(self, coords: torch.Tensor) -> torch.Tensor:
        b = self.b_matrix.to(coords.dtype)
        return self.mlp(fourier_features(sphere_map(coords), b))

    def forward(self, grid_h: int, grid_w: int) -> torch.Tensor:
        """Embeddings for a whole grid, shape (grid_h * grid_w, d_model)."""
        dtype = self.b_matrix.dtype
        coords = grid_coords(grid_h, grid_w, self.half_pixel, dtype=dtype).to(self.b_matrix.device)
        return self.embed_normalized(coords)

    def embed(self, c: GridCoord) -> torch.Tensor:
        x_hat, y_hat = standardize_coords(c, self.half_pixel)
        coords = torch.tensor([[x_hat, y_hat]], dtype=self.b_matrix.dtype, device=self.b_matrix.device)
        return self.embed_normalized(coords)[0]
