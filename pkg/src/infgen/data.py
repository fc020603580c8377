"""PNG I/O and a deterministic synthetic image source."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import torch
from PIL import Image


def read_png(path) -> torch.Tensor:
    """8-bit RGB file -> (3, H, W) float32 in [-1, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return torch.from_numpy(arr / 127.5 - 1.0).permute(2, 0, 1).contiguous()


def to_uint8(img: torch.Tensor) -> np.ndarray:
    if img.ndim == 4:
        img = img[0]
    arr = ((img.detach().float().clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8)
    return arr.permute(1, 2, 0).cpu().numpy()


def write_png(img: torch.Tensor, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def list_pngs(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"missing image directory {d}")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise FileNotFoundError(f"no PNG files in {d}")
    return files


def load_png_dir(directory) -> list[torch.Tensor]:
    return [read_png(p) for p in list_pngs(directory)]


def synthetic_image(height: int, width: int, rng: np.random.Generator) -> torch.Tensor:
    """Smooth colour gradient plus a few discs and a stripe pattern, in [-1, 1]."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    yy /= height
    xx /= width
    img = np.zeros((3, height, width))
    for c in range(3):
        a, b, off = rng.uniform(-1, 1, size=3)
        img[c] = 0.5 * (a * xx + b * yy) + 0.3 * off
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        r = rng.uniform(0.08, 0.25)
        color = rng.uniform(-1, 1, size=3)
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r ** 2
        img[:, mask] = color[:, None]
    freq = rng.uniform(3, 8)
    angle = rng.uniform(0, math.pi)
    stripes = np.sin(2 * math.pi * freq * (xx * math.cos(angle) + yy * math.sin(angle)))
    img += 0.15 * stripes[None]
    return torch.from_numpy(np.clip(img, -1, 1)).float()


def synthetic_images(n: int, height: int, width: int | None = None, seed: int = 0) -> list[torch.Tensor]:
    rng = np.random.default_rng(seed)
    return [synthetic_image(height, width or height, rng) for _ in range(n)]
