"""Train mixing weights on a single triplet and log the loss curve."""

import argparse
import json
import logging
from pathlib import Path

import numpy as np

from trimix import denoiser as dn
from trimix import tensor as tn
from trimix.evaluate import heatmap_png
from trimix.experiments import DEFAULT_CACHE, default_base
from trimix.mixopt import AdaptConfig, load_batch, mix_loss, train_mix, weight_report
from trimix.tristream import MixWeights
from trimix.tensor import Tensor


def panel(ds, params, arch, mw, tid, n=8, seed=55):
    rng = np.random.default_rng(seed)
    ts = np.linspace(round(0.1 * arch.T), round(0.9 * arch.T), n).round().astype(int)
    logits = Tensor(mw.logits.astype(np.float32))
    with tn.no_grad():
        return [mix_loss(params, arch, mw, logits, load_batch(ds, tid, int(t), None, rng)).item() for t in ts]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--triplet", default="torus:green->yellow")
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/few_shot")
    ap.add_argument("--cache", default=str(DEFAULT_CACHE))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO)
    ds, params, arch, _ = default_base(args.cache)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mw, losses = train_mix(ds, params, arch, AdaptConfig(steps=args.steps, seed=args.seed, triplets=[args.triplet]))
    mw.save(out / "mix.tmx")
    heatmap_png(mw.alpha_table(), out / "heatmap.png")
    (out / "loss.csv").write_text("".join(f"{i},{v!r}\n" for i, v in enumerate(losses)))
    S = len(dn.ATTENTION_LAYERS)
    res = {name: float(np.mean(panel(ds, params, arch, w, args.triplet)))
           for name, w in [("uniform", MixWeights.zeros(S, arch.views)), ("trained", mw),
                           ("main_only", MixWeights.constant(S, arch.views, ["main"] * S))]}
    res["layer_entropy"] = weight_report(mw)["layer_entropy"].tolist()
    (out / "summary.json").write_text(json.dumps(res, indent=1))
    print(json.dumps(res, indent=1))


if __name__ == "__main__":
    main()
