"""Run the seven-rung ablation ladder on the cached base model."""

import argparse
import json
import logging

from trimix.evaluate import AblationConfig, run_ablation
from trimix.experiments import DEFAULT_CACHE, default_base


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--eval-triplets", default="cube:blue_gloss->gold,torus:blue_gloss->red,slab:red->teal",
                    help="comma-separated; empty for every held-out triplet")
    ap.add_argument("--mix-steps", type=int, default=300)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--cache", default=str(DEFAULT_CACHE))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO)
    ds, params, arch, _ = default_base(args.cache)
    cfg = AblationConfig(eval_triplets=[t for t in args.eval_triplets.split(",") if t],
                         mix_steps=args.mix_steps, seed=args.seed)
    summary = run_ablation(ds, params, arch, cfg, args.out)
    for name, r in summary["rungs"].items():
        m = r["means"]
        print(f"{name:22s} psnr {m['psnr']:6.2f}  d_ref {m['dist_reference']:.3f}  "
              f"d_src {m['dist_source']:.3f}  iou {m['iou']:.2f}")
    print(json.dumps(summary["config"]))


if __name__ == "__main__":
    main()
