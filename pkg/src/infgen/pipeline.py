"""Model construction from a RunConfig, checkpoint packing and the run loops."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, parse_config
from .decoder import DecoderConfig, InfGenDecoder
from .features import FeaturePyramid
from .latent_codec import VAE, vae_pretrain_step
from .training import (LossLog, LossWeights, PatchDiscriminator, StageConfig, Trainer,
                       resize, sample_training_batch)

log = logging.getLogger(__name__)


def decoder_config(cfg: RunConfig) -> DecoderConfig:
    return DecoderConfig(
        latent_channels=cfg.latent_channels, d_model=cfg.d_model, blocks=cfg.blocks, heads=cfg.heads,
        mlp_ratio=cfg.mlp_ratio, fourier_m=cfg.fourier_m, sigma_b=cfg.sigma_b,
        head_channels=cfg.head_channels, self_attention=cfg.self_attention,
        half_pixel=cfg.half_pixel, max_res=cfg.max_res,
    )


def stages(cfg: RunConfig) -> list[StageConfig]:
    return [StageConfig(cfg.stage1_min, cfg.stage1_max, cfg.stage1_batch, cfg.stage1_steps),
            StageConfig(cfg.stage2_min, cfg.stage2_max, cfg.stage2_batch, cfg.stage2_steps)]


def stage_at(cfg: RunConfig, step: int) -> tuple[int, StageConfig]:
    s1, s2 = stages(cfg)
    return (1, s1) if step < s1.steps else (2, s2)


def _seeded(seed: int, build):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return build()


def build_vae(cfg: RunConfig) -> VAE:
    return _seeded(cfg.seed_for("init.vae"), lambda: VAE(cfg.latent_channels, cfg.vae_ch))


def build_decoder(cfg: RunConfig) -> InfGenDecoder:
    gen = torch.Generator().manual_seed(cfg.seed_for("init.fourier"))
    return _seeded(cfg.seed_for("init.decoder"), lambda: InfGenDecoder(decoder_config(cfg), generator=gen))


def build_disc(cfg: RunConfig) -> PatchDiscriminator:
    return _seeded(cfg.seed_for("init.disc"), lambda: PatchDiscriminator(cfg.disc_ch))


@dataclass
class Bundle:
    cfg: RunConfig
    vae: VAE
    decoder: InfGenDecoder | None = None
    disc: PatchDiscriminator | None = None
    features: FeaturePyramid | None = None
    step: int = 0
    trainer: Trainer | None = None

    @property
    def encoder(self):
        return self.vae.encoder


def _module_tensors(prefix: str, module: torch.nn.Module, out: dict, groups: dict):
    for name, t in module.state_dict().items():
        out[f"{prefix}.{name}"] = t
        groups[f"{prefix}.{name}"] = prefix


def _load_module(prefix: str, module: torch.nn.Module, tensors: dict):
    state = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
    if not state:
        raise CheckpointError(f"checkpoint has no {prefix} tensors")
    try:
        module.load_state_dict(state)
    except RuntimeError as e:
        raise CheckpointError(f"{prefix}: {str(e).splitlines()[0]}") from None


def _optim_tensors(prefix: str, opt: torch.optim.Optimizer, module: torch.nn.Module, out: dict, groups: dict):
    for name, p in module.named_parameters():
        for key, val in opt.state.get(p, {}).items():
            out[f"{prefix}.{name}.{key}"] = torch.as_tensor(val, dtype=torch.float32)
            groups[f"{prefix}.{name}.{key}"] = prefix


def _load_optim(prefix: str, opt: torch.optim.Optimizer, module: torch.nn.Module, tensors: dict):
    for name, p in module.named_parameters():
        keys = ("step", "exp_avg", "exp_avg_sq")
        if all(f"{prefix}.{name}.{k}" in tensors for k in keys):
            opt.state[p] = {k: tensors[f"{prefix}.{name}.{k}"].clone() for k in keys}


def _rng_tensor(gen: torch.Generator) -> torch.Tensor:
    return gen.get_state().to(torch.float32)


def _set_rng(gen: torch.Generator, t: torch.Tensor):
    gen.set_state(t.to(torch.uint8))


def bundle_checkpoint(b: Bundle, data_gen: torch.Generator | None = None) -> Checkpoint:
    tensors, groups = {}, {}
    _module_tensors("encoder", b.vae.encoder, tensors, groups)
    frozen = {"encoder": True}
    kind = "vae"
    if b.decoder is None:
        _module_tensors("vae_decoder", b.vae.decoder, tensors, groups)
        frozen["vae_decoder"] = False
    else:
        kind = "infgen"
        _module_tensors("decoder", b.decoder, tensors, groups)
        _module_tensors("disc", b.disc, tensors, groups)
        frozen.update(decoder=False, disc=False)
    if b.trainer is not None:
        _optim_tensors("optim_g", b.trainer.opt_g, b.decoder, tensors, groups)
        _optim_tensors("optim_d", b.trainer.opt_d, b.disc, tensors, groups)
        tensors["rng.noise"] = _rng_tensor(b.trainer.noise)
        groups["rng.noise"] = "rng"
    if data_gen is not None:
        tensors["rng.data"] = _rng_tensor(data_gen)
        groups["rng.data"] = "rng"
    return Checkpoint(b.cfg.to_text(), b.cfg.digest(), tensors, groups, frozen, b.step, kind)


def save_bundle(b: Bundle, path, data_gen=None):
    save_checkpoint(bundle_checkpoint(b, data_gen), path)


def load_bundle(path, cfg: RunConfig | None = None, force: bool = False) -> tuple[Bundle, Checkpoint]:
    """Rebuild models from a checkpoint.  A given `cfg` must match the stored digest unless forced."""
    ck = load_checkpoint(path, expect_digest=cfg.digest() if cfg else None, force=force)
    stored = parse_config(ck.config_text)
    cfg = cfg or stored
    vae = build_vae(cfg)
    _load_module("encoder", vae.encoder, ck.tensors)
    vae.freeze_encoder()
    b = Bundle(cfg, vae, step=ck.step, features=FeaturePyramid())
    if ck.kind == "infgen":
        b.decoder = build_decoder(cfg)
        _load_module("decoder", b.decoder, ck.tensors)
        b.disc = build_disc(cfg)
        _load_module("disc", b.disc, ck.tensors)
        b.decoder.eval()
    else:
        _load_module("vae_decoder", vae.decoder, ck.tensors)
    return b, ck


def make_trainer(b: Bundle) -> Trainer:
    cfg = b.cfg
    return Trainer(b.vae.encoder, b.decoder, b.disc, b.features,
                   LossWeights(cfg.lambda_p, cfg.lambda_g), lr=cfg.lr, lr_min=cfg.lr_min,
                   total_steps=cfg.total_steps, adv_warmup=cfg.adv_warmup,
                   weight_decay=cfg.weight_decay, sample_latent=cfg.sample_latent,
                   seed=cfg.seed_for("reparameterize"))


def restore_trainer(b: Bundle, ck: Checkpoint) -> torch.Generator:
    """Attach a trainer with optimizer/RNG state from `ck`; returns the data generator."""
    b.trainer = make_trainer(b)
    b.trainer.step = ck.step
    _load_optim("optim_g", b.trainer.opt_g, b.decoder, ck.tensors)
    _load_optim("optim_d", b.trainer.opt_d, b.disc, ck.tensors)
    if "rng.noise" in ck.tensors:
        _set_rng(b.trainer.noise, ck.tensors["rng.noise"])
    data_gen = torch.Generator().manual_seed(b.cfg.seed_for("data"))
    if "rng.data" in ck.tensors:
        _set_rng(data_gen, ck.tensors["rng.data"])
    return data_gen


def vae_input_batch(sources, size: int, batch: int, gen: torch.Generator) -> torch.Tensor:
    """Random square crops of random side, resized to the encoder input size."""
    idx = torch.randint(0, len(sources), (batch,), generator=gen)
    out = []
    for i in idx.tolist():
        src = sources[i]
        H, W = src.shape[-2:]
        side = int(torch.randint(min(size, H, W), min(H, W) + 1, (1,), generator=gen))
        top = int(torch.randint(0, H - side + 1, (1,), generator=gen))
        left = int(torch.randint(0, W - side + 1, (1,), generator=gen))
        out.append(resize(src[:, top:top + side, left:left + side], (size, size)))
    return torch.stack(out)


def pretrain_vae(cfg: RunConfig, sources, steps: int | None = None, log_every: int = 100) -> Bundle:
    vae = build_vae(cfg)
    opt = torch.optim.AdamW(vae.parameters(), lr=cfg.vae_lr, weight_decay=0.0)
    gen = torch.Generator().manual_seed(cfg.seed_for("data.vae"))
    noise = torch.Generator().manual_seed(cfg.seed_for("reparameterize.vae"))
    steps = cfg.vae_steps if steps is None else steps
    for step in range(steps):
        batch = vae_input_batch(sources, cfg.image_size, cfg.vae_batch, gen)
        parts = vae_pretrain_step(vae, opt, batch, cfg.vae_beta, noise)
        if step % log_every == 0 or step == steps - 1:
            log.info("vae step %d l1 %.4f kl %.4f", step, parts["l1"], parts["kl"])
    vae.freeze_encoder()
    return Bundle(cfg, vae, step=0)


def init_infgen(vae_bundle: Bundle, cfg: RunConfig | None = None) -> Bundle:
    cfg = cfg or vae_bundle.cfg
    vae_bundle.vae.freeze_encoder()
    b = Bundle(cfg, vae_bundle.vae, build_decoder(cfg), build_disc(cfg), FeaturePyramid(), step=0)
    b.trainer = make_trainer(b)
    return b


def train(b: Bundle, sources, data_gen: torch.Generator, until: int, loss_log: LossLog | None = None):
    """Run trainer steps from the bundle's current step up to `until` (exclusive)."""
    cfg, tr = b.cfg, b.trainer
    current_stage = None
    history = []
    while tr.step < until:
        stage_id, stage = stage_at(cfg, tr.step)
        if stage_id != current_stage:
            log.info("step %d: stage %d, targets [%d, %d], batch %d",
                     tr.step, stage_id, stage.min_size, stage.max_size, stage.batch_size)
            current_stage = stage_id
        idx = torch.randint(0, len(sources), (stage.batch_size,), generator=data_gen).tolist()
        inputs, targets = sample_training_batch([sources[i] for i in idx], stage, cfg.image_size, data_gen)
        step = tr.step
        parts = tr.train_step(inputs, targets)
        history.append(parts)
        if loss_log is not None:
            loss_log.write(step, tr.last_lr, parts, stage=stage_id,
                           target=list(targets.shape[-2:]))
    b.step = tr.step
    return history
