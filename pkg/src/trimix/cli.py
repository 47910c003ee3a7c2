"""Command-line entry point: ``trimix <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import denoiser as dn
from .checkpoint import CheckpointError
from .dataset import (DatasetConfig, DatasetError, Dataset, default_materials, default_shapes, load_png,
                      make_dataset, save_png)
from .evaluate import AblationConfig, EvalReport, MetricError, evaluate_views, heatmap_png, run_ablation
from .mixopt import AdaptConfig, train_mix, weight_report
from .render import RenderError
from .train_base import TrainConfig, TrainingError, train_base
from .tristream import ContractError, MixWeights, SamplerConfig, argmax_table, sample_transfer

log = logging.getLogger("trimix")

ARCHS = {"default": dn.DenoiserConfig, "micro": lambda **kw: dn.DenoiserConfig(
    **{**dn.MICRO_CONFIG.to_dict(), **kw})}


def thread_cap() -> int | None:
    raw = os.environ.get("TRIMIX_THREADS")
    if not raw:
        return None
    n = int(raw)
    if n < 1:
        raise ValueError("TRIMIX_THREADS must be a positive integer")
    return n


def write_run_config(out_dir: Path, command: str, args: argparse.Namespace, extra: dict | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    resolved["command"] = command
    if extra:
        resolved.update(extra)
    (out_dir / f"{command}.config.json").write_text(json.dumps(resolved, indent=1, sort_keys=True, default=str))


def _csv(s: str) -> list[str]:
    return [x for x in s.split(",") if x]


# ----------------------------------------------------------------- commands


def cmd_render_dataset(args) -> int:
    cap = thread_cap()
    workers = min(args.workers, cap) if cap else args.workers
    cfg = DatasetConfig(resolution=args.resolution, views=args.views, workers=workers)
    shapes, mats = default_shapes(), default_materials()
    if args.shapes:
        shapes = {k: shapes[k] for k in _csv(args.shapes)}
    if args.materials:
        mats = {k: mats[k] for k in _csv(args.materials)}
    if args.held_out is not None:
        cfg.held_out = tuple(tuple(p.split("/")) for p in _csv(args.held_out))
    cfg.held_out = tuple(p for p in cfg.held_out if p[0] in shapes and p[1] in mats)
    out = Path(args.out)
    manifest = make_dataset(shapes, mats, cfg, out)
    write_run_config(out, "render-dataset", args, {"dataset": asdict(cfg)})
    print(f"wrote {len(manifest['entries'])} images, {len(manifest['triplets'])} triplets to {out}")
    return 0


def cmd_train_base(args) -> int:
    ds = Dataset(args.manifest)
    arch = ARCHS[args.arch](resolution=ds.resolution, views=ds.views)
    cfg = TrainConfig(lr=args.lr, steps=args.steps, seed=args.seed, batch=args.batch,
                      checkpoint_interval=args.checkpoint_interval)
    out = Path(args.out)
    _, losses = train_base(ds, cfg, arch, out=out)
    np.savetxt(out.with_suffix(".loss.csv"), np.asarray(losses), fmt="%.9g")
    write_run_config(out.parent, "train-base", args, {"train": asdict(cfg), "architecture": arch.to_dict()})
    print(f"final loss {losses[-1]:.5f}; checkpoint {out}")
    return 0


def cmd_train_mix(args) -> int:
    ds = Dataset(args.manifest)
    params, arch = dn.load_params(args.base)
    triplets = _csv(args.triplets) if args.triplets else ds.triplet_ids("train")
    streams = (not args.two_stream, True, True)
    cfg = AdaptConfig(lr=args.lr, steps=args.steps, seed=args.seed, per_frame=args.per_frame,
                      triplets=triplets, streams=streams, unconditional_main=not args.conditional_main)
    mw, losses = train_mix(ds, params, arch, cfg)
    out = Path(args.out)
    mw.save(out, extra={"adapt": asdict(cfg)})
    np.savetxt(out.with_suffix(".loss.csv"), np.asarray(losses), fmt="%.9g")
    rep = weight_report(mw)
    write_run_config(out.parent, "train-mix", args, {"adapt": asdict(cfg)})
    print(f"loss {losses[0]:.5f} -> {losses[-1]:.5f}; layer entropy {[round(float(x), 3) for x in rep['layer_entropy']]}")
    return 0


def _load_reference(path: Path, views: int) -> np.ndarray:
    if path.is_dir():
        files = sorted(path.glob("*.png"))
        if len(files) != views:
            raise ContractError(f"reference directory must hold exactly {views} PNGs, found {len(files)}")
        return np.stack([load_png(f) for f in files])
    return load_png(path)


def cmd_transfer(args) -> int:
    params, arch = dn.load_params(args.base)
    mw = MixWeights.load(args.mix)
    obj = load_png(args.object)
    ref = _load_reference(Path(args.reference), arch.views)
    cfg = SamplerConfig(cfg_main=args.cfg_main, cfg_object=args.cfg_object, cfg_reference=args.cfg_reference,
                        argmax_select=args.argmax, extra_frame=args.extra_frame, steps=args.steps,
                        unconditional_main=not args.conditional_main)
    res = sample_transfer(obj, ref, params, arch, mw, cfg, seed=args.seed)
    out = Path(args.out)
    for k in range(arch.views):
        save_png(out / "main" / f"v{k}.png", res.main[k])
        save_png(out / "object" / f"v{k}.png", res.object[k])
    write_run_config(out, "transfer", args, {"sampler": asdict(cfg)})
    print(f"wrote {arch.views} views to {out}")
    return 0


def _png_dir(path: Path) -> list[Path]:
    files = sorted(path.glob("*.png"))
    if not files:
        raise ContractError(f"no PNG files in {path}")
    return files


def cmd_eval(args) -> int:
    pred_files, gt_files = _png_dir(Path(args.pred)), _png_dir(Path(args.gt))
    if [f.name for f in pred_files] != [f.name for f in gt_files]:
        raise ContractError("prediction and ground-truth directories hold different file names")
    pred = np.stack([load_png(f) for f in pred_files])
    gt = np.stack([load_png(f) for f in gt_files])
    ref = load_png(args.reference) if args.reference else gt[0]
    src = load_png(args.source) if args.source else gt[0]
    rows = evaluate_views(args.name, pred, gt, src, ref, None)
    report = EvalReport(rows, {"pred": str(args.pred), "gt": str(args.gt), "files": [f.name for f in pred_files]})
    out = Path(args.out)
    report.save(out)
    write_run_config(out, "eval", args)
    print(json.dumps(report.means(), sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    ds = Dataset(args.manifest)
    params, arch = dn.load_params(args.base)
    cfg = AblationConfig(train_triplets=_csv(args.train_triplets or ""),
                         eval_triplets=_csv(args.eval_triplets or ""), mix_steps=args.mix_steps,
                         seed=args.seed, sample_steps=args.sample_steps)
    out = Path(args.out)
    summary = run_ablation(ds, params, arch, cfg, out)
    write_run_config(out, "ablate", args, {"ablation": asdict(cfg)})
    for name, r in summary["rungs"].items():
        print(f"{name}: psnr {r['means']['psnr']:.3f}")
    return 0


def cmd_heatmap(args) -> int:
    mw = MixWeights.load(args.mix)
    table = mw.alpha_table()
    if args.argmax:
        table = argmax_table(table)
    out = Path(args.out)
    heatmap_png(table, out, cell=args.cell)
    write_run_config(out.parent, "heatmap", args)
    print(f"wrote {out}")
    return 0


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trimix", description="Multiview appearance transfer toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="<command>")

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--seed", type=int, default=0)
        sp.set_defaults(func=func)
        return sp

    sp = add("render-dataset", cmd_render_dataset, "render the synthetic dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--resolution", type=int, default=32)
    sp.add_argument("--views", type=int, default=4)
    sp.add_argument("--shapes", default="", help="comma-separated subset of shape ids")
    sp.add_argument("--materials", default="", help="comma-separated subset of material ids")
    sp.add_argument("--held-out", default=None, help="comma-separated shape/material pairs")
    sp.add_argument("--workers", type=int, default=1)

    sp = add("train-base", cmd_train_base, "pretrain the base denoiser")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--steps", type=int, default=10_000)
    sp.add_argument("--lr", type=float, default=2e-4)
    sp.add_argument("--batch", type=int, default=1)
    sp.add_argument("--arch", choices=sorted(ARCHS), default="default")
    sp.add_argument("--checkpoint-interval", type=int, default=1000)

    sp = add("train-mix", cmd_train_mix, "train the mixing weights")
    sp.add_argument("--base", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--triplets", default="", help="comma-separated triplet ids (default: all train)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--steps", type=int, default=300)
    sp.add_argument("--lr", type=float, default=1e-2)
    sp.add_argument("--per-frame", action="store_true")
    sp.add_argument("--two-stream", action="store_true", help="disable the object stream")
    sp.add_argument("--conditional-main", action="store_true", help="condition the main stream on the object")

    sp = add("transfer", cmd_transfer, "run three-stream appearance transfer")
    sp.add_argument("--base", required=True)
    sp.add_argument("--mix", required=True)
    sp.add_argument("--object", required=True)
    sp.add_argument("--reference", required=True, help="PNG, or a directory of F PNGs")
    sp.add_argument("--out", required=True)
    sp.add_argument("--argmax", action="store_true")
    sp.add_argument("--cfg-main", type=float, default=5.0)
    sp.add_argument("--cfg-object", type=float, default=2.0)
    sp.add_argument("--cfg-reference", type=float, default=2.0)
    sp.add_argument("--steps", type=int, default=50)
    sp.add_argument("--extra-frame", action="store_true")
    sp.add_argument("--conditional-main", action="store_true")

    sp = add("eval", cmd_eval, "score predicted views against ground truth")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--reference", default=None, help="reference PNG (default: first GT view)")
    sp.add_argument("--source", default=None, help="source-material PNG (default: first GT view)")
    sp.add_argument("--name", default="sample")
    sp.add_argument("--out", required=True)

    sp = add("ablate", cmd_ablate, "run the ablation ladder")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--base", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--train-triplets", default="")
    sp.add_argument("--eval-triplets", default="")
    sp.add_argument("--mix-steps", type=int, default=300)
    sp.add_argument("--sample-steps", type=int, default=50)

    sp = add("heatmap", cmd_heatmap, "render a mixing-weight heatmap")
    sp.add_argument("--mix", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--argmax", action="store_true")
    sp.add_argument("--cell", type=int, default=8)
    return p


CONTRACT_ERRORS = (ContractError, DatasetError, CheckpointError, MetricError, TrainingError, RenderError,
                   ValueError, KeyError, OSError, FloatingPointError)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else argv
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cap = thread_cap()
        if cap:
            from threadpoolctl import threadpool_limits
            limiter = threadpool_limits(limits=cap)
        else:
            limiter = nullcontext()
        with limiter:
            return args.func(args)
    except CONTRACT_ERRORS as e:
        print(f"trimix {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
