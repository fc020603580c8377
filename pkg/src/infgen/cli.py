"""Command-line entry point: ``infgen <command> ...``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config
from .data import list_pngs, load_png_dir, read_png, synthetic_images, write_png
from .extrapolation import DESK_LIMITS, plan_schedule, run_extrapolation, validate_against_limits
from .features import FeaturePyramid
from .latent_codec import DivergenceError, encode
from .metrics import crop_patches, patch_frechet, psnr, ssim
from .pipeline import init_infgen, load_bundle, pretrain_vae, restore_trainer, save_bundle, train
from .training import LossLog

log = logging.getLogger("infgen")

EXIT_CODES = {ConfigError: 2, FileNotFoundError: 3, CheckpointError: 4, DivergenceError: 5, ValueError: 6}


def output_dir() -> Path:
    return Path(os.environ.get("INFGEN_OUTPUT_DIR", "runs"))


def out_path(arg, default_name: str) -> Path:
    return Path(arg) if arg else output_dir() / default_name


def parse_hw(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None


def get_config(args) -> RunConfig | None:
    return load_config(args.config) if getattr(args, "config", None) else None


def sources_from(args, cfg: RunConfig) -> list[torch.Tensor]:
    if args.data:
        return load_png_dir(args.data)
    size = max(cfg.stage1_max, cfg.stage2_max, cfg.image_size)
    return synthetic_images(args.synthetic, size, seed=cfg.seed_for("synthetic"))


def latent_from(args, bundle) -> torch.Tensor:
    cfg = bundle.cfg
    if args.latent:
        z = torch.from_numpy(np.load(args.latent)).float()
        if z.ndim == 3:
            z = z[None]
        return z
    if args.image:
        img = read_png(args.image)[None]
        return encode(bundle.encoder, img).mu
    side = cfg.image_size // 8
    gen = torch.Generator().manual_seed(args.seed)
    return torch.randn(1, cfg.latent_channels, side, side, generator=gen)


def cmd_pretrain_vae(args):
    cfg = get_config(args) or RunConfig()
    sources = sources_from(args, cfg)
    b = pretrain_vae(cfg, sources, steps=args.steps)
    path = out_path(args.out, "vae.ckpt")
    save_bundle(b, path)
    print(f"wrote {path}")


def cmd_train(args):
    cfg = get_config(args)
    if args.resume:
        b, ck = load_bundle(args.resume, cfg, force=args.force)
        data_gen = restore_trainer(b, ck)
    else:
        if not args.vae:
            raise ConfigError("train needs --vae or --resume")
        vb, _ = load_bundle(args.vae, cfg, force=args.force)
        b = init_infgen(vb)
        data_gen = torch.Generator().manual_seed(b.cfg.seed_for("data"))
    sources = sources_from(args, b.cfg)
    until = b.step + args.steps if args.steps is not None else b.cfg.total_steps
    loss_log = LossLog(out_path(args.log, "loss.jsonl"))
    train(b, sources, data_gen, until, loss_log)
    path = out_path(args.out, "infgen.ckpt")
    save_bundle(b, path, data_gen)
    print(f"step {b.step}; wrote {path}")


def _load_infgen(args):
    b, _ = load_bundle(args.checkpoint, get_config(args), force=args.force)
    if b.decoder is None:
        raise CheckpointError(f"{args.checkpoint} holds no generator (VAE-only checkpoint)")
    return b


@torch.inference_mode()
def cmd_decode(args):
    b = _load_infgen(args)
    z = latent_from(args, b)
    img = b.decoder(z, (args.height, args.width))
    path = out_path(args.out, "decoded.png")
    write_png(img, path)
    print(f"wrote {path} ({args.height}x{args.width})")


@torch.inference_mode()
def cmd_extrapolate(args):
    b = _load_infgen(args)
    z = latent_from(args, b)
    base = args.base or (b.cfg.image_size, b.cfg.image_size)
    cap = args.cap or b.cfg.extrapolation_cap
    plan = plan_schedule(base, args.target, cap)
    print(f"plan: {plan.describe()}")
    print(f"resolutions: {plan.resolutions()}")
    for w in validate_against_limits(plan, DESK_LIMITS):
        print(f"warning: {w}")
    path = out_path(args.out, "extrapolated.png")

    def save_step(n, image):
        if args.save_intermediates:
            write_png(image, path.with_name(f"{path.stem}_step{n}.png"))

    img = run_extrapolation(z, plan, b.encoder, b.decoder, on_step=save_step)
    if not torch.isfinite(img).all():
        raise DivergenceError("extrapolated image contains non-finite pixels")
    write_png(img, path)
    print(f"wrote {path} ({img.shape[-2]}x{img.shape[-1]})")


def cmd_eval(args):
    cfg = get_config(args) or RunConfig()
    real_files = list_pngs(args.real)
    fake_files = list_pngs(args.fake)
    fake_by_name = {p.name: p for p in fake_files}
    real, fake, ps, ss = [], [], [], []
    for rp in real_files:
        if rp.name not in fake_by_name:
            raise FileNotFoundError(f"{rp.name} missing from {args.fake}")
        x, y = read_png(rp), read_png(fake_by_name[rp.name])
        if x.shape != y.shape:
            raise ValueError(f"{rp.name}: size {tuple(x.shape[1:])} vs {tuple(y.shape[1:])}")
        real.append(x)
        fake.append(y)
        ps.append(psnr(x, y))
        ss.append(ssim(x, y))
    patch = args.patch or cfg.patch_size
    extractor = FeaturePyramid()
    n_patches = sum(len(crop_patches(x, patch)) for x in real)
    metrics = {"psnr": float(np.mean(ps)), "ssim": float(np.mean(ss)), "n_images": len(real),
               "n_patches": n_patches, "patch": patch}
    if n_patches >= 2:
        metrics["rFD_p"] = patch_frechet(real, fake, extractor, patch)
        metrics["sFD_p"] = patch_frechet(real, fake, extractor, patch, spatial=True)
    h = hashlib.sha256()
    for p in real_files + fake_files:
        h.update(p.read_bytes())
    report = {"run_id": args.run_id or f"eval-{h.hexdigest()[:12]}", "config_digest": cfg.digest(),
              "metrics": metrics}
    path = out_path(args.report, "metrics.json")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    for k, v in metrics.items():
        print(f"{k}\t{v}")
    print(f"wrote {path}")


def fit_power_law(pixels, values) -> float:
    """Least-squares slope of log(value) against log(pixels)."""
    x, y = np.log(np.asarray(pixels, float)), np.log(np.asarray(values, float))
    return float(np.polyfit(x, y, 1)[0])


def decode_flops(decoder, z, size) -> int:
    from torch.utils.flop_counter import FlopCounterMode
    counter = FlopCounterMode(display=False)
    # the counter's module tracker needs autograd enabled
    with torch.enable_grad(), counter:
        decoder(z, size)
    return counter.get_total_flops()


def benchmark(decoder, z, sizes, repeats: int = 9, min_seconds: float = 1.0):
    """Steady-state median wall time and FLOP count of one decode per square size.

    Each size is timed at least `repeats` times and for at least `min_seconds`.
    """
    rows = []
    for s in sizes:
        times = []
        with torch.inference_mode():
            for _ in range(3):
                decoder(z, (s, s))  # warmup
            while len(times) < repeats or sum(times) < min_seconds:
                t0 = time.perf_counter()
                decoder(z, (s, s))
                times.append(time.perf_counter() - t0)
        rows.append({"size": s, "pixels": s * s, "seconds": float(np.median(times)), "samples": len(times),
                     "flops": decode_flops(decoder, z, (s, s))})
    return rows


def cmd_bench(args):
    if args.checkpoint:
        b = _load_infgen(args)
        decoder, cfg = b.decoder, b.cfg
    else:
        from .pipeline import build_decoder
        cfg = get_config(args) or RunConfig()
        decoder = build_decoder(cfg).eval()
    side = cfg.image_size // 8
    z = torch.randn(1, cfg.latent_channels, side, side, generator=torch.Generator().manual_seed(0))
    sizes = [int(s) for s in args.sizes.split(",")]
    rows = benchmark(decoder, z, sizes, args.repeats, args.min_seconds)
    print("size\tpixels\tseconds\tgflops")
    for r in rows:
        print(f"{r['size']}x{r['size']}\t{r['pixels']}\t{r['seconds']:.4f}\t{r['flops'] / 1e9:.3f}")
    t_exp = fit_power_law([r["pixels"] for r in rows], [r["seconds"] for r in rows])
    f_exp = fit_power_law([r["pixels"] for r in rows], [r["flops"] for r in rows])
    ok = 0.8 <= t_exp <= 1.3
    print(f"time exponent {t_exp:.3f} ({'within' if ok else 'OUTSIDE'} [0.8, 1.3]); flop exponent {f_exp:.3f}")
    if args.out:
        Path(args.out).write_text(json.dumps({"rows": rows, "time_exponent": t_exp,
                                              "flop_exponent": f_exp}, indent=2) + "\n")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="infgen", description="Arbitrary-resolution latent decoder")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def data_args(sp):
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--data", help="directory of PNG training images")
        g.add_argument("--synthetic", type=int, default=16, help="number of synthetic images if --data is absent")

    def ckpt_args(sp):
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--config")
        sp.add_argument("--force", action="store_true", help="accept a checkpoint from a different config")

    def source_args(sp):
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--latent", help=".npy latent of shape (C, h, w)")
        g.add_argument("--image", help="PNG to encode with the frozen encoder")
        g.add_argument("--seed", type=int, default=0, help="seed for a random N(0, I) latent")

    sp = sub.add_parser("pretrain-vae", help="pretrain the encoder")
    sp.add_argument("--config")
    data_args(sp)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_pretrain_vae)

    sp = sub.add_parser("train", help="train the generator")
    sp.add_argument("--config")
    sp.add_argument("--vae")
    sp.add_argument("--resume")
    sp.add_argument("--force", action="store_true")
    data_args(sp)
    sp.add_argument("--steps", type=int, help="steps to run (default: to the end of the schedule)")
    sp.add_argument("--out")
    sp.add_argument("--log", help="loss log path (JSON lines, appended)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("decode", help="decode a latent at any resolution")
    ckpt_args(sp)
    source_args(sp)
    sp.add_argument("--height", type=int, required=True)
    sp.add_argument("--width", type=int, required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("extrapolate", help="iterative resolution extrapolation")
    ckpt_args(sp)
    source_args(sp)
    sp.add_argument("--target", type=parse_hw, required=True)
    sp.add_argument("--base", type=parse_hw)
    sp.add_argument("--cap", type=float)
    sp.add_argument("--save-intermediates", action="store_true")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_extrapolate)

    sp = sub.add_parser("eval", help="PSNR / SSIM / patch rFD over paired image directories")
    sp.add_argument("--real", required=True)
    sp.add_argument("--fake", required=True)
    sp.add_argument("--config")
    sp.add_argument("--patch", type=int)
    sp.add_argument("--run-id")
    sp.add_argument("--report")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="decode latency against output resolution")
    sp.add_argument("--checkpoint")
    sp.add_argument("--config")
    sp.add_argument("--force", action="store_true")
    sp.add_argument("--sizes", default="64,128,192,256")
    sp.add_argument("--repeats", type=int, default=9)
    sp.add_argument("--min-seconds", type=float, default=1.0, help="timing budget per size")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except tuple(EXIT_CODES) as e:
        code = next(c for cls, c in EXIT_CODES.items() if isinstance(e, cls))
        msg = str(e).splitlines()[0] if str(e) else ""
        print(f"infgen: error: {type(e).__name__}: {msg}", file=sys.stderr)
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
