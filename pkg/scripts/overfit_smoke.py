"""Overfit the micro config to one 48x48 textured image at scale 4.

Prints the L1 loss and train-image Y-PSNR every 250 steps. The acceptance
suite runs the same routine with the committed threshold.
"""
import argparse

from hpinet.config import HpiConfig
from hpinet.imaging import ImagePlane, bilinear_resize
from hpinet.metrics import psnr
from hpinet.synthetic import textured_image
from hpinet.training import degrade, overfit_single_image


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--lr", type=float, default=3e-4)
    ap.add_argument("--image-seed", type=int, default=0)
    args = ap.parse_args()

    cfg = HpiConfig.micro(scale=4)
    hr = textured_image(48, args.image_seed)
    base = psnr(ImagePlane(bilinear_resize(degrade(hr, 4), 48, 48)), ImagePlane(hr))
    print(f"bilinear baseline\t{base:.3f} dB")
    res = overfit_single_image(cfg, hr, args.steps, args.lr)
    for step, value in res.psnr.items():
        print(f"step {step}\tloss {res.losses[step - 1]:.5f}\tpsnr {value:.3f} dB")
    print(f"elapsed\t{res.seconds:.1f} s")


if __name__ == "__main__":
    main()
