"""Grow an image past the training size by repeated decode / re-encode.

    python3 scripts/run_extrapolation_demo.py runs/overfit/model.ckpt --target 256x192
"""

import argparse
from pathlib import Path

import torch

from infgen.cli import parse_hw
from infgen.data import read_png, synthetic_images, write_png
from infgen.extrapolation import DESK_LIMITS, plan_schedule, run_extrapolation, validate_against_limits
from infgen.latent_codec import encode
from infgen.pipeline import load_bundle
from infgen.training import resize


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("checkpoint", type=Path)
    ap.add_argument("--image", type=Path, help="source PNG (default: a synthetic image)")
    ap.add_argument("--target", type=parse_hw, default=(256, 256))
    ap.add_argument("--cap", type=float, default=2.0)
    ap.add_argument("--out", type=Path, default=Path("runs/extrapolation"))
    args = ap.parse_args()
    torch.set_num_threads(1)

    b, _ = load_bundle(args.checkpoint)
    b.decoder.eval()
    s = b.cfg.image_size
    src = read_png(args.image) if args.image else synthetic_images(1, s, seed=3)[0]
    src = resize(src, (s, s))
    plan = plan_schedule((s, s), args.target, args.cap)
    print(plan.describe())
    for w in validate_against_limits(plan, DESK_LIMITS):
        print("warning:", w)
    args.out.mkdir(parents=True, exist_ok=True)
    write_png(src, args.out / "source.png")

    def save(n, image):
        write_png(image, args.out / f"step{n}_{image.shape[-2]}x{image.shape[-1]}.png")

    with torch.inference_mode():
        z = encode(b.encoder, src[None]).mu
        final = run_extrapolation(z, plan, b.encoder, b.decoder, on_step=save)
        direct = b.decoder(z, args.target)
    write_png(direct, args.out / "direct.png")
    print(f"final {tuple(final.shape[-2:])}; single-step decode saved as direct.png for comparison")


if __name__ == "__main__":
    main()
