"""Overfit the desk model on a handful of synthetic images and report the l1 drop.

    python3 scripts/run_overfit.py --steps 500 --out runs/overfit
"""

import argparse
import logging
from pathlib import Path

import numpy as np
import torch

from infgen.config import RunConfig
from infgen.data import synthetic_images, write_png
from infgen.latent_codec import encode
from infgen.pipeline import init_infgen, pretrain_vae, save_bundle, train
from infgen.training import LossLog


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--images", type=int, default=8)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--vae-steps", type=int, default=300)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("runs/overfit"))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    torch.set_num_threads(1)

    cfg = RunConfig(seed=args.seed, image_size=args.size, vae_steps=args.vae_steps,
                    stage1_min=args.size, stage1_max=args.size, stage1_batch=args.images)
    sources = synthetic_images(args.images, args.size, seed=1)
    b = init_infgen(pretrain_vae(cfg, sources))
    data_gen = torch.Generator().manual_seed(cfg.seed_for("data"))
    args.out.mkdir(parents=True, exist_ok=True)
    log_path = args.out / "loss.jsonl"
    log_path.unlink(missing_ok=True)
    history = train(b, sources, data_gen, args.steps, LossLog(log_path))
    save_bundle(b, args.out / "model.ckpt", data_gen)

    l1 = np.array([p.l1 for p in history])
    end = l1[-10:].mean()
    print(f"l1 step 0 {l1[0]:.4f} -> last-10 mean {end:.4f} ({1 - end / l1[0]:.1%} drop)")
    b.decoder.eval()
    with torch.inference_mode():
        for i, x in enumerate(sources[:4]):
            rec = b.decoder(encode(b.encoder, x[None]).mu, (args.size, args.size))
            write_png(torch.cat([x, rec[0]], dim=-1), args.out / f"pair_{i}.png")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
