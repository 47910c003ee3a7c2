"""Transfer from a reference whose colour changes with azimuth.

Each reference frame is the sphere in a different material at that frame's
camera, which exercises latent replacement of the reference stream.
"""

import argparse
import colorsys
from pathlib import Path

import numpy as np

from trimix.dataset import save_png
from trimix.experiments import DEFAULT_CACHE, default_base
from trimix.render import foreground_mask
from trimix.tristream import MixWeights, SamplerConfig, sample_transfer


def dominant_hue(img, tol=0.2):
    px = img[foreground_mask(img, tol)]
    hsv = np.array([colorsys.rgb_to_hsv(*p) for p in px])
    ang = hsv[:, 0] * 2 * np.pi
    return float(np.degrees(np.arctan2((hsv[:, 1] * np.sin(ang)).sum(), (hsv[:, 1] * np.cos(ang)).sum())) % 360)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--mix", required=True, help="trained mix weights (.tmx)")
    ap.add_argument("--materials", default="teal,yellow,blue_gloss,green")
    ap.add_argument("--object", default="torus/checker_bw", help="shape/material orbit id")
    ap.add_argument("--soft", action="store_true", help="keep soft alphas instead of argmax")
    ap.add_argument("--seed", type=int, default=8)
    ap.add_argument("--out", default="runs/multiview_reference")
    ap.add_argument("--cache", default=str(DEFAULT_CACHE))
    args = ap.parse_args()
    ds, params, arch, _ = default_base(args.cache)
    mats = args.materials.split(",")
    ref = np.stack([ds.orbit(f"refsphere/{m}")[0][k] for k, m in enumerate(mats)])
    _, obj = ds.orbit(args.object)
    res = sample_transfer(obj, ref, params, arch, MixWeights.load(args.mix),
                          SamplerConfig(argmax_select=not args.soft), seed=args.seed)
    out = Path(args.out)
    for k in range(arch.views):
        save_png(out / f"reference_v{k}.png", ref[k])
        save_png(out / f"main_v{k}.png", res.main[k])
        print(f"view {k}: reference hue {dominant_hue(ref[k]):5.0f}  output hue {dominant_hue(res.main[k]):5.0f}")


if __name__ == "__main__":
    main()
