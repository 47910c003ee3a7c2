"""Metrics, weight heatmaps, reports and the ablation ladder."""

from __future__ import annotations

import colorsys
import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import denoiser as dn
from .dataset import Dataset, save_png
from .mixopt import AdaptConfig, train_mix, weight_report
from .render import foreground_mask
from .tristream import MixWeights, SamplerConfig, argmax_table, sample_transfer

log = logging.getLogger(__name__)

PSNR_CAP = 60.0
HIST_BINS = 8
# generated images never hit the key colour exactly
MASK_TOL = 0.2
STREAM_COLORS = np.array([[1.0, 0.0, 0.0], [0.5, 0.5, 0.5], [0.0, 0.0, 1.0]])


class MetricError(ValueError):
    pass


def psnr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return min(PSNR_CAP, 10 * math.log10(1.0 / mse))


def silhouette_iou(a_mask, b_mask) -> float:
    a = np.asarray(a_mask, dtype=bool)
    b = np.asarray(b_mask, dtype=bool)
    if a.shape != b.shape:
        raise MetricError(f"silhouette_iou: shape mismatch {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def color_histogram(img, mask) -> np.ndarray:
    """Hue and value histograms of the foreground, HIST_BINS bins each.

    Hue votes are weighted by saturation so that greys do not pick an
    arbitrary hue. Each half carries mass 0.5 (the hue half is empty for a
    fully achromatic foreground).
    """
    img = np.asarray(img, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != img.shape[:2]:
        raise MetricError(f"mask shape {mask.shape} does not match image {img.shape[:2]}")
    px = img[mask]
    if px.shape[0] == 0:
        raise MetricError("appearance_distance: empty foreground")
    hsv = np.array([colorsys.rgb_to_hsv(*p) for p in np.clip(px, 0, 1)])
    bins = lambda x: np.clip((x * HIST_BINS).astype(np.int64), 0, HIST_BINS - 1)
    hue = np.bincount(bins(hsv[:, 0]), weights=hsv[:, 1], minlength=HIST_BINS)
    if hue.sum() > 0:
        hue = hue / hue.sum()
    val = np.bincount(bins(hsv[:, 2]), minlength=HIST_BINS).astype(np.float64)
    return 0.5 * np.concatenate([hue, val / val.sum()])


def chi_square(h1, h2) -> float:
    s = h1 + h2
    nz = s > 0
    return float(np.sum((h1[nz] - h2[nz]) ** 2 / s[nz]))


def appearance_distance(img, mask, reference_img, reference_mask=None) -> float:
    """Chi-square between foreground colour histograms; the reference is keyed
    out automatically unless ``reference_mask`` is given."""
    if reference_mask is None:
        reference_mask = foreground_mask(reference_img)
    return chi_square(color_histogram(img, mask), color_histogram(reference_img, reference_mask))


# ----------------------------------------------------------------- reports


@dataclass
class SampleRow:
    triplet: str
    view: int
    psnr: float
    dist_reference: float
    dist_source: float
    iou: float


@dataclass
class EvalReport:
    rows: list[SampleRow] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def means(self) -> dict:
        if not self.rows:
            return {}
        return {k: float(np.mean([getattr(r, k) for r in self.rows]))
                for k in ("psnr", "dist_reference", "dist_source", "iou")}

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = [f.name for f in fields(SampleRow)]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(names)
        for r in self.rows:
            w.writerow([repr(getattr(r, n)) if isinstance(getattr(r, n), float) else getattr(r, n)
                        for n in names])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, meta: dict | None = None) -> "EvalReport":
        rows = []
        for rec in csv.DictReader(io.StringIO(text)):
            rows.append(SampleRow(rec["triplet"], int(rec["view"]), float(rec["psnr"]),
                                  float(rec["dist_reference"]), float(rec["dist_source"]), float(rec["iou"])))
        return cls(rows, dict(meta or {}))

    def to_json(self) -> str:
        return json.dumps({"meta": self.meta, "means": self.means(),
                           "rows": [asdict(r) for r in self.rows]}, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls([SampleRow(**r) for r in d["rows"]], d["meta"])

    def save(self, out_dir, stem: str = "report") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.csv").write_text(self.to_csv())
        (out / f"{stem}.json").write_text(self.to_json())


def evaluate_views(triplet_id: str, generated, target, source_image, reference_image, object_views=None,
                   tol: float = MASK_TOL) -> list[SampleRow]:
    """Per-view rows. ``object_views`` (the object-stream output) defines the
    silhouette used for IoU; without it the target silhouette is used."""
    rows = []
    src_mask = foreground_mask(source_image)
    for k in range(len(generated)):
        g = generated[k]
        gm = foreground_mask(g, tol)
        ref_sil = foreground_mask(object_views[k], tol) if object_views is not None else foreground_mask(target[k])
        if gm.any():
            d_ref = appearance_distance(g, gm, reference_image)
            d_src = appearance_distance(g, gm, source_image, src_mask)
        else:
            d_ref = d_src = float("nan")
        rows.append(SampleRow(triplet_id, k, psnr(g, target[k]), d_ref, d_src, silhouette_iou(gm, ref_sil)))
    return rows


# ----------------------------------------------------------------- heatmaps


def heatmap_image(table: np.ndarray, cell: int = 8) -> np.ndarray:
    """(S*cell, F*cell, 3) image; rows are layers, columns are frames."""
    table = np.asarray(table, dtype=np.float64)
    if table.ndim != 3 or table.shape[2] != 3:
        raise MetricError(f"alpha table must be (S, F, 3), got {table.shape}")
    img = table @ STREAM_COLORS
    return np.repeat(np.repeat(img, cell, axis=0), cell, axis=1)


def heatmap_png(table: np.ndarray, path, cell: int = 8) -> np.ndarray:
    img = heatmap_image(table, cell)
    save_png(path, img)
    return img


# ----------------------------------------------------------------- ablation


@dataclass
class AblationConfig:
    train_triplets: list[str] = field(default_factory=list)   # empty: all train triplets
    eval_triplets: list[str] = field(default_factory=list)    # empty: all held-out triplets
    mix_steps: int = 300
    mix_lr: float = 1e-2
    seed: int = 0
    sample_steps: int = 50
    cfg_low: float = 2.0
    cfg_high: float = 5.0


@dataclass
class Rung:
    name: str
    sampler: SamplerConfig
    adapt: AdaptConfig | None      # None: hand-set weights
    reuse: str | None = None       # reuse weights trained by an earlier rung


def manual_weights(frames: int) -> MixWeights:
    """Reference stream at the decoder-side layers, main stream elsewhere."""
    per_layer = ["reference" if l in dn.DECODER_SIDE_LAYERS else "main" for l in range(len(dn.ATTENTION_LAYERS))]
    return MixWeights.constant(len(dn.ATTENTION_LAYERS), frames, per_layer)


def ablation_ladder(cfg: AblationConfig, train_ids: list[str]) -> list[Rung]:
    lo = cfg.cfg_low
    base = dict(lr=cfg.mix_lr, steps=cfg.mix_steps, seed=cfg.seed, triplets=train_ids)
    s = lambda **kw: SamplerConfig(cfg_main=kw.pop("cfg_main", lo), steps=cfg.sample_steps,
                                   unconditional_main=kw.pop("unc", False), **kw)
    two = AdaptConfig(per_frame=False, streams=(False, True, True), unconditional_main=False, **base)
    three = replace(two, streams=(True, True, True))
    perframe = replace(three, per_frame=True)
    unc = replace(perframe, unconditional_main=True)
    return [
        Rung("1_manual", s(), None),
        Rung("2_two_stream", s(), two),
        Rung("3_three_stream", s(), three),
        Rung("4_per_frame", s(), perframe),
        Rung("5_unconditional_main", s(unc=True), unc),
        Rung("6_cfg_main_high", s(unc=True, cfg_main=cfg.cfg_high), None, reuse="5_unconditional_main"),
        Rung("7_argmax", s(unc=True, cfg_main=cfg.cfg_high, argmax_select=True), None,
             reuse="5_unconditional_main"),
    ]


def transfer_report(dataset: Dataset, params, arch, mw: MixWeights, sampler: SamplerConfig,
                    triplet_ids: list[str], seed: int, out_dir=None) -> EvalReport:
    rows = []
    for i, tid in enumerate(triplet_ids):
        trip = dataset.triplet(tid)
        res = sample_transfer(trip.object_image, trip.reference_image, params, arch, mw, sampler, seed=seed + i)
        rows += evaluate_views(tid, res.main, trip.target_views, trip.object_image, trip.reference_image,
                               res.object)
        if out_dir is not None:
            safe = tid.replace(":", "_").replace("->", "_to_")
            for k, img in enumerate(res.main):
                save_png(Path(out_dir) / "samples" / safe / f"v{k}.png", img)
    return EvalReport(rows, {"sampler": asdict(sampler)})


def run_ablation(dataset: Dataset, params, arch, config: AblationConfig, out_dir) -> dict:
    held = config.eval_triplets or dataset.triplet_ids("held_out")
    train_ids = config.train_triplets or dataset.triplet_ids("train")
    if not held:
        raise MetricError("ablation needs a held-out split")
    if not train_ids:
        raise MetricError("ablation needs at least one train triplet")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trained: dict[str, MixWeights] = {}
    summary = {"config": asdict(config), "decoder_side_layers": list(dn.DECODER_SIDE_LAYERS),
               "eval_triplets": held, "train_triplets": train_ids, "rungs": {}}
    for rung in ablation_ladder(config, train_ids):
        rdir = out / rung.name
        if rung.adapt is not None:
            mw, losses = train_mix(dataset, params, arch, rung.adapt)
            (rdir).mkdir(parents=True, exist_ok=True)
            (rdir / "mix_loss.csv").write_text("".join(f"{i},{v!r}\n" for i, v in enumerate(losses)))
        elif rung.reuse is not None:
            mw = trained[rung.reuse]
        else:
            mw = manual_weights(arch.views)
        trained[rung.name] = mw
        table = mw.alpha_table()
        if rung.sampler.argmax_select:
            table = argmax_table(table)
        rdir.mkdir(parents=True, exist_ok=True)
        mw.save(rdir / "mix.tmx")
        heatmap_png(table, rdir / "heatmap.png")
        report = transfer_report(dataset, params, arch, mw, rung.sampler, held, config.seed, rdir)
        report.meta.update(rung=rung.name, adapt=asdict(rung.adapt) if rung.adapt else None)
        report.save(rdir)
        summary["rungs"][rung.name] = {"means": report.means(),
                                       "layer_entropy": weight_report(mw)["layer_entropy"].tolist()}
        log.info("rung %s: %s", rung.name, report.means())
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary
