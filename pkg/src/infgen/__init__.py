"""Fixed-size latent in, arbitrary-resolution image out."""

from .config import RunConfig, load_config, parse_config
from .decoder import DecoderConfig, InfGenDecoder, decode
from .extrapolation import ExtrapolationPlan, plan_schedule, run_extrapolation
from .inpe import INPE
from .latent_codec import VAE, GaussianLatent, encode, kl_divergence, reparameterize

__all__ = [
    "RunConfig", "load_config", "parse_config",
    "DecoderConfig", "InfGenDecoder", "decode",
    "ExtrapolationPlan", "plan_schedule", "run_extrapolation",
    "INPE", "VAE", "GaussianLatent", "encode", "kl_divergence", "reparameterize",
]
