import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from trimix import denoiser as dn
from trimix.dataset import load_png
from trimix.evaluate import (STREAM_COLORS, AblationConfig, EvalReport, MetricError, SampleRow, ablation_ladder,
                             appearance_distance, heatmap_image, heatmap_png, manual_weights, psnr, run_ablation,
                             silhouette_iou, transfer_report)
from trimix.render import KEY_COLOR
from trimix.tristream import MixWeights, argmax_table

S = len(dn.ATTENTION_LAYERS)


def test_psnr_examples(rng):
    a = rng.random((4, 4, 3))
    assert psnr(a, a) == 60.0
    assert psnr(np.zeros((2, 2, 3)), np.ones((2, 2, 3))) == 0.0
    b = np.zeros((10, 10))
    c = np.full((10, 10), 0.1)      # MSE = 0.01
    assert abs(psnr(b, c) - 20.0) < 1e-9
    with pytest.raises(MetricError):
        psnr(a, a[:2])


def test_iou_examples():
    a = np.zeros((4, 8), bool)
    b = np.zeros((4, 8), bool)
    assert silhouette_iou(a, b) == 1.0
    a[:, :4] = True
    assert silhouette_iou(a, a) == 1.0
    b[:, 4:] = True
    assert silhouette_iou(a, b) == 0.0
    b[:] = False
    b[:, 2:6] = True          # half of each rectangle overlaps
    assert abs(silhouette_iou(a, b) - 1 / 3) < 1e-12
    with pytest.raises(MetricError):
        silhouette_iou(a, b[:2])


def _blob(color, size=8):
    img = np.tile(KEY_COLOR, (size, size, 1)).astype(float)
    img[2:6, 2:6] = color
    return img


def test_appearance_distance_examples(rng):
    red, blue = _blob((1, 0, 0)), _blob((0, 0, 1))
    mask = np.abs(red - KEY_COLOR).max(-1) > 0
    assert appearance_distance(red, mask, red) == 0.0
    # same value, disjoint hue
    assert abs(appearance_distance(red, mask, blue) - 1.0) < 1e-12
    # disjoint hue and value
    assert abs(appearance_distance(red, mask, _blob((0, 0, 0.3))) - 2.0) < 1e-12
    # a grey with the same value only differs in the hue half
    assert abs(appearance_distance(red, mask, _blob((1, 1, 1))) - 0.5) < 1e-12
    noisy = _blob(rng.uniform(0, 1, (4, 4, 3)))
    assert 0 < appearance_distance(noisy, mask, red) <= 2.0
    with pytest.raises(MetricError):
        appearance_distance(red, np.zeros((8, 8), bool), blue)
    with pytest.raises(MetricError):
        appearance_distance(red, mask, np.tile(KEY_COLOR, (8, 8, 1)))


@given(hnp.arrays(np.float64, (4, 4, 3), elements=st.floats(0, 1)),
       hnp.arrays(np.float64, (4, 4, 3), elements=st.floats(0, 1)))
@settings(max_examples=60, deadline=None)
def test_appearance_distance_symmetric(a, b):
    ia, ib = _blob(a), _blob(b)
    m = np.zeros((8, 8), bool)
    m[2:6, 2:6] = True
    d1 = appearance_distance(ia, m, ib, m)
    d2 = appearance_distance(ib, m, ia, m)
    assert abs(d1 - d2) <= 1e-9
    assert 0 <= d1 <= 2 + 1e-12


def test_heatmap_colors(tmp_path):
    uni = heatmap_image(MixWeights.zeros(S, 4).alpha_table(), cell=3)
    assert uni.shape == (S * 3, 4 * 3, 3)
    np.testing.assert_allclose(uni, np.broadcast_to(STREAM_COLORS.mean(0), uni.shape))
    blue = heatmap_image(MixWeights.constant(S, 4, ["main"] * S).alpha_table())
    np.testing.assert_array_equal(blue, np.broadcast_to([0.0, 0.0, 1.0], blue.shape))
    table = argmax_table(MixWeights(np.random.default_rng(0).normal(size=(S, 4, 3))).alpha_table())
    img = heatmap_png(table, tmp_path / "h.png", cell=2)
    colors = {tuple(c) for c in np.round(load_png(tmp_path / "h.png") * 255).astype(int).reshape(-1, 3)}
    assert colors <= {(255, 0, 0), (128, 128, 128), (0, 0, 255)}
    assert img.shape == (S * 2, 8, 3)


_f = st.floats(-1e100, 1e100, allow_nan=False)


@given(st.lists(st.tuples(st.text("abc:->_", min_size=1, max_size=10), st.integers(0, 9), _f, _f, _f, _f),
                max_size=6))
@settings(max_examples=50, deadline=None)
def test_report_roundtrip(rows):
    rep = EvalReport([SampleRow(*r) for r in rows], {"rung": "x", "k": [1, 2]})
    assert EvalReport.from_csv(rep.to_csv(), rep.meta) == rep
    assert EvalReport.from_json(rep.to_json()) == rep


def test_report_means():
    rep = EvalReport([SampleRow("a", 0, 10.0, 0.5, 1.0, 1.0), SampleRow("a", 1, 20.0, 0.1, 1.5, 0.5)])
    assert rep.means() == {"psnr": 15.0, "dist_reference": 0.3, "dist_source": 1.25, "iou": 0.75}


def test_manual_weights_select_decoder_side():
    table = manual_weights(2).alpha_table()
    for layer in range(S):
        expect = [0, 1, 0] if layer in dn.DECODER_SIDE_LAYERS else [0, 0, 1]
        np.testing.assert_array_equal(table[layer], [expect] * 2)


def test_ladder_structure():
    rungs = ablation_ladder(AblationConfig(), ["t"])
    assert [r.name[0] for r in rungs] == list("1234567")
    assert rungs[0].adapt is None and rungs[0].reuse is None
    assert rungs[1].adapt.streams == (False, True, True) and not rungs[1].adapt.per_frame
    assert rungs[2].adapt.streams == (True, True, True)
    assert rungs[3].adapt.per_frame and not rungs[3].sampler.unconditional_main
    assert rungs[4].sampler.unconditional_main and rungs[4].adapt.unconditional_main
    assert rungs[5].sampler.cfg_main == 5.0 and rungs[4].sampler.cfg_main == 2.0
    assert rungs[6].sampler.argmax_select and not rungs[5].sampler.argmax_select


def test_manual_rung_is_deterministic(micro_dataset, micro_params, micro_arch):
    rung = ablation_ladder(AblationConfig(sample_steps=3), [])[0]
    ids = micro_dataset.triplet_ids("held_out")[:1]
    a = transfer_report(micro_dataset, micro_params, micro_arch, manual_weights(2), rung.sampler, ids, 0)
    b = transfer_report(micro_dataset, micro_params, micro_arch, manual_weights(2), rung.sampler, ids, 0)
    assert a.to_csv() == b.to_csv() and len(a.rows) == micro_arch.views


def test_run_ablation_outputs(tmp_path, micro_dataset, micro_params, micro_arch):
    cfg = AblationConfig(mix_steps=2, sample_steps=2, train_triplets=["torus:red->gold"],
                         eval_triplets=micro_dataset.triplet_ids("held_out")[:1])
    summary = run_ablation(micro_dataset, micro_params, micro_arch, cfg, tmp_path)
    assert len(summary["rungs"]) == 7
    assert json.loads((tmp_path / "summary.json").read_text())["decoder_side_layers"] == [2, 3, 4]
    for name in summary["rungs"]:
        d = tmp_path / name
        assert (d / "heatmap.png").exists() and (d / "report.csv").exists() and (d / "mix.tmx").exists()
    hm = load_png(tmp_path / "7_argmax" / "heatmap.png").reshape(-1, 3)
    pure = np.round(STREAM_COLORS * 255) / 255
    assert all(np.abs(pure - c).max(axis=1).min() < 1e-6 for c in np.round(hm * 255) / 255)


def test_run_ablation_needs_held_out(tmp_path, micro_dataset, micro_params, micro_arch):
    ds = micro_dataset
    saved = dict(ds.triplets)
    try:
        ds.triplets = {k: v for k, v in saved.items() if v["split"] == "train"}
        with pytest.raises(MetricError, match="held-out"):
            run_ablation(ds, micro_params, micro_arch, AblationConfig(mix_steps=1), tmp_path)
    finally:
        ds.triplets = saved
