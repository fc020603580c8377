"""Run configuration: flat `key = value` text, validated and digested."""

from __future__ import annotations

import hashlib
import zlib
from dataclasses import dataclass, fields, replace

import numpy as np


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    image_size: int = 64
    latent_channels: int = 4
    vae_ch: int = 32
    vae_steps: int = 2000
    vae_batch: int = 8
    vae_lr: float = 2e-4
    vae_beta: float = 1e-4
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
    disc_ch: int = 32
    lambda_p: float = 0.1
    lambda_g: float = 0.1
    adv_warmup: int = 200
    lr: float = 2e-4
    lr_min: float = 1e-5
    weight_decay: float = 0.01
    sample_latent: bool = True
    stage1_min: int = 64
    stage1_max: int = 128
    stage1_batch: int = 8
    stage1_steps: int = 5000
    stage2_min: int = 64
    stage2_max: int = 256
    stage2_batch: int = 2
    stage2_steps: int = 1000
    extrapolation_cap: float = 2.0
    patch_size: int = 32

    def __post_init__(self):
        problems = []
        if self.image_size % 8 or self.image_size < 16:
            problems.append("image_size must be a multiple of 8 and >= 16")
        if self.d_model % self.heads:
            problems.append("heads must divide d_model")
        for name in ("latent_channels", "vae_ch", "d_model", "blocks", "heads", "fourier_m",
                     "head_channels", "disc_ch", "max_res", "patch_size"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be positive")
        for name in ("lambda_p", "lambda_g", "lr", "lr_min", "vae_beta", "weight_decay"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be non-negative")
        for s in (1, 2):
            lo, hi = getattr(self, f"stage{s}_min"), getattr(self, f"stage{s}_max")
            if not 16 <= lo <= hi <= self.max_res:
                problems.append(f"stage{s} range [{lo}, {hi}] must sit inside [16, max_res]")
            if getattr(self, f"stage{s}_batch") < 1:
                problems.append(f"stage{s}_batch must be positive")
        if self.extrapolation_cap <= 1:
            problems.append("extrapolation_cap must exceed 1")
        if problems:
            raise ConfigError("; ".join(problems))

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def replace(self, **changes) -> "RunConfig":
        return replace(self, **changes)

    @property
    def total_steps(self) -> int:
        return self.stage1_steps + self.stage2_steps

    def seed_for(self, subsystem: str) -> int:
        return subseed(self.seed, subsystem)


def subseed(root: int, name: str) -> int:
    """Independent 63-bit seed per named subsystem, derived from the root seed."""
    ss = np.random.SeedSequence([root, zlib.crc32(name.encode())])
    return int(ss.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


def _coerce(name: str, raw: str, typ):
    try:
        if typ is bool or typ == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ is int or typ == "int":
            return int(raw)
        if typ is float or typ == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {typ}") from None
    return raw


def parse_config(text: str) -> RunConfig:
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, raw, types[key])
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    with open(path) as f:
        return parse_config(f.read())
