import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from trimix import denoiser as dn
from trimix import tensor as tn
from trimix.tensor import Tensor
from trimix.tristream import (ContractError, KVCapture, MainStreamMixer, MixWeights, SamplerConfig, Stream,
                              StreamBundle, alphas_from_logits, argmax_select, argmax_table, check_registry,
                              layer_alphas, mix_kv, reference_latent_replacement, sample_transfer,
                              tri_stream_denoise_step)

S = len(dn.ATTENTION_LAYERS)
_logit = st.floats(-30, 30)


def main_only(frames):
    return MixWeights.constant(S, frames, ["main"] * S)


# ----------------------------------------------------------------- weights

def test_alpha_examples():
    mw = MixWeights.zeros(S, 2)
    np.testing.assert_allclose(alphas_from_logits(mw, 0, 1), (1 / 3,) * 3, rtol=0, atol=1e-15)
    mw.logits[1, 0] = (10, 0, 0)
    assert alphas_from_logits(mw, 1, 0)[0] > 0.9999


def test_shared_over_frames_broadcasts():
    mw = MixWeights(np.random.default_rng(0).normal(size=(S, 1, 3)), per_frame=False, frames=4)
    for layer in range(S):
        rows = {alphas_from_logits(mw, layer, f) for f in range(4)}
        assert len(rows) == 1
    assert mw.alpha_table().shape == (S, 4, 3)
    assert mw.trainable_count == S * 3


def test_alpha_index_errors():
    mw = MixWeights.zeros(S, 2)
    with pytest.raises(IndexError):
        alphas_from_logits(mw, S, 0)
    with pytest.raises(IndexError):
        alphas_from_logits(mw, 0, 2)


def test_mixweights_validation():
    with pytest.raises(ContractError):
        MixWeights(np.zeros((S, 2, 2)))
    with pytest.raises(ContractError):
        MixWeights(np.full((S, 2, 3), np.nan))
    with pytest.raises(ContractError):
        MixWeights.zeros(S, 2, streams=(False, False, False))
    with pytest.raises(ContractError):
        check_registry(MixWeights.zeros(S - 1, 2), dn.MICRO_CONFIG)
    with pytest.raises(ContractError):
        check_registry(MixWeights.zeros(S, 3), dn.MICRO_CONFIG)


@given(hnp.arrays(np.float64, (3,), elements=_logit))
@settings(max_examples=200, deadline=None)
def test_alphas_are_probability_triples(logits):
    mw = MixWeights(np.tile(logits, (S, 1, 1)), frames=1)
    a = alphas_from_logits(mw, 0, 0)
    assert min(a) >= 0 and abs(sum(a) - 1) <= 1e-6


def test_disabled_stream_gets_exact_zero():
    mw = MixWeights(np.full((S, 2, 3), 5.0), streams=(False, True, True))
    table = mw.alpha_table()
    assert (table[..., 0] == 0).all()
    np.testing.assert_allclose(table[..., 1:], 0.5)


def test_argmax_examples():
    assert argmax_select((0.2, 0.3, 0.5)) == (0, 0, 1)
    assert argmax_select((1 / 3, 1 / 3, 1 / 3)) == (0, 0, 1)
    assert argmax_select((0.4, 0.4, 0.2)) == (1, 0, 0)
    assert argmax_select((0.1, 0.45, 0.45)) == (0, 0, 1)
    for one_hot in [(1, 0, 0), (0, 1, 0), (0, 0, 1)]:
        assert argmax_select(one_hot) == one_hot


@given(hnp.arrays(np.float64, (3,), elements=st.floats(0, 1)))
@settings(max_examples=200, deadline=None)
def test_argmax_is_one_hot_on_a_maximum(a):
    out = argmax_select(a)
    assert sorted(out) == [0, 0, 1]
    assert a[out.index(1)] == a.max()


def test_argmax_table_matches_cellwise(rng):
    mw = MixWeights(rng.normal(size=(S, 3, 3)))
    table = mw.alpha_table()
    hard = argmax_table(table)
    for l in range(S):
        for f in range(3):
            assert tuple(hard[l, f]) == argmax_select(table[l, f])


# ----------------------------------------------------------------- mix_kv

def _kv(rng, frames=2, tokens=5, c=4):
    return [Tensor(rng.standard_normal((frames * tokens, c))) for _ in range(6)]


def _alphas(rows):
    return Tensor(np.asarray(rows, dtype=np.float64))


def test_mix_kv_one_hot_identities(rng):
    ko, kr, km, vo, vr, vm = _kv(rng)
    k, v = mix_kv(ko, kr, km, vo, vr, vm, _alphas([(0, 0, 1)] * 2), 2)
    assert k.data.tobytes() == km.data.tobytes() and v.data.tobytes() == vm.data.tobytes()
    k, v = mix_kv(ko, kr, km, vo, vr, vm, _alphas([(1, 0, 0)] * 2), 2)
    assert k.data.tobytes() == ko.data.tobytes() and v.data.tobytes() == vo.data.tobytes()


def test_mix_kv_per_frame_blocks(rng):
    ko, kr, km, vo, vr, vm = _kv(rng, frames=2, tokens=3)
    k, _ = mix_kv(ko, kr, km, vo, vr, vm, _alphas([(0, 1, 0), (0.5, 0, 0.5)]), 2)
    np.testing.assert_array_equal(k.data[:3], kr.data[:3])
    np.testing.assert_allclose(k.data[3:], 0.5 * ko.data[3:] + 0.5 * km.data[3:])


@given(hnp.arrays(np.float64, (2, 3), elements=_logit), st.integers(0, 2**31 - 1))
@settings(max_examples=100, deadline=None)
def test_mix_kv_convexity(logits, seed):
    r = np.random.default_rng(seed)
    k = r.standard_normal((8, 3))
    v = r.standard_normal((8, 3))
    alphas = tn.softmax(Tensor(logits), axis=-1)
    km, vm = mix_kv(*(Tensor(k),) * 3, *(Tensor(v),) * 3, alphas, 2)
    np.testing.assert_allclose(km.data, k, atol=1e-6 * (1 + np.abs(k).max()))
    np.testing.assert_allclose(vm.data, v, atol=1e-6 * (1 + np.abs(v).max()))


def test_mix_kv_shape_errors(rng):
    ko, kr, km, vo, vr, vm = _kv(rng)
    with pytest.raises(tn.ShapeError):
        mix_kv(ko, kr, Tensor(np.zeros((3, 4))), vo, vr, vm, _alphas([(0, 0, 1)] * 2), 2)
    with pytest.raises(tn.ShapeError):
        mix_kv(ko, kr, km, vo, vr, vm, _alphas([(0, 0, 1)] * 3), 3)
    with pytest.raises(tn.ShapeError):
        mix_kv(ko, kr, km, vo, vr, vm, _alphas([(0, 0, 1)]), 2)


def test_mix_kv_without_main_stream(rng):
    ko, kr, km, vo, vr, vm = _kv(rng)
    k, _ = mix_kv(ko, kr, None, vo, vr, None, _alphas([(0.25, 0.75, 0)] * 2), 2, (True, True, False))
    np.testing.assert_allclose(k.data, 0.25 * ko.data + 0.75 * kr.data)


def test_identical_streams_leave_network_unchanged(micro_params, micro_arch, rng):
    x = Tensor(rng.standard_normal((2, 16, 16, 3)).astype(np.float32))
    cond = rng.uniform(-1, 1, (16, 16, 3)).astype(np.float32)
    emb = dn.encode_condition(micro_params, micro_arch, cond)
    cap = KVCapture()
    base = dn.predict_eps(micro_params, micro_arch, x, cond, emb, 50, hook=cap).data
    mw = MixWeights(rng.normal(size=(S, 2, 3)) * 3)
    # feed the main stream its own K/V as "object" and "reference" at every layer
    mixer = MainStreamMixer(mw, Tensor(mw.logits), (0, 1), cap, cap)
    mixed = dn.predict_eps(micro_params, micro_arch, x, cond, emb, 50, hook=mixer).data
    np.testing.assert_allclose(mixed, base, atol=1e-5)


def test_layer_alphas_gradient(rng):
    mw = MixWeights(rng.normal(size=(S, 2, 3)))
    with tn.float64_mode():
        err = tn.grad_check(lambda z: tn.sum_all(tn.square(layer_alphas(z, mw, 2, (1, 0)))),
                            Tensor(mw.logits.astype(np.float64), requires_grad=True))
    assert err < 1e-7


# ----------------------------------------------------------------- sampling

STEPS = 5


@pytest.fixture()
def images(rng):
    obj = rng.uniform(0, 1, (16, 16, 3))
    ref = rng.uniform(0, 1, (16, 16, 3))
    return obj, ref


def test_main_only_equals_standalone_sampler(micro_params, micro_arch, images):
    obj, ref = images
    cfg = SamplerConfig(cfg_main=2.0, unconditional_main=False, steps=STEPS)
    res = sample_transfer(obj, ref, micro_params, micro_arch, main_only(2), cfg, seed=11)
    solo = dn.sample(micro_params, micro_arch, obj, cfg_scale=2.0, steps=STEPS, seed=11)
    assert res.main.tobytes() == solo.tobytes()


def test_side_streams_ignore_mix_weights(micro_params, micro_arch, images, rng):
    obj, ref = images
    cfg = SamplerConfig(steps=STEPS, cfg_object=1.5, cfg_reference=3.0)
    a = sample_transfer(obj, ref, micro_params, micro_arch, MixWeights(rng.normal(size=(S, 2, 3))), cfg, seed=3)
    b = sample_transfer(obj, ref, micro_params, micro_arch, MixWeights.zeros(S, 2), cfg, seed=3)
    assert a.object.tobytes() == b.object.tobytes()
    assert a.reference.tobytes() == b.reference.tobytes()
    assert a.main.tobytes() != b.main.tobytes()
    solo_o = dn.sample(micro_params, micro_arch, obj, cfg_scale=1.5, steps=STEPS, seed=3)
    solo_r = dn.sample(micro_params, micro_arch, ref, cfg_scale=3.0, steps=STEPS, seed=3)
    assert a.object.tobytes() == solo_o.tobytes()
    assert a.reference.tobytes() == solo_r.tobytes()


def _bundle(params, arch, obj, ref, rng, t=120, clean_reference=None):
    o, r = dn.to_signal(obj), dn.to_signal(ref)
    e_o, e_r = dn.encode_condition(params, arch, o), dn.encode_condition(params, arch, r)
    x = lambda: rng.standard_normal((2, 16, 16, 3)).astype(np.float32)
    return StreamBundle(Stream(x(), o, e_o, 2.0), Stream(x(), r, e_r, 2.0),
                        Stream(x(), None, tn.scale(tn.add(e_o, e_r), 0.5), 5.0), t, (0, 1),
                        clean_reference=clean_reference, ref_rng=np.random.default_rng(0))


def test_argmax_all_reference_uses_reference_kv(micro_params, micro_arch, images, rng):
    obj, ref = images
    bundle = _bundle(micro_params, micro_arch, obj, ref, rng)
    logits = np.zeros((S, 2, 3))
    logits[..., 1] = 0.1     # reference narrowly strongest everywhere
    trace = {}
    cfg = SamplerConfig(argmax_select=True)
    tri_stream_denoise_step(bundle, micro_params, micro_arch, MixWeights(logits), cfg, 100, trace=trace)
    cap = KVCapture()
    dn.predict_eps(micro_params, micro_arch, Tensor(bundle.reference.x), bundle.reference.cond,
                   bundle.reference.emb, bundle.t, hook=cap)
    assert sorted(trace) == list(range(S))
    for layer, calls in trace.items():
        assert len(calls) == 2     # conditional and unconditional main passes
        for km, vm in calls:
            assert km.tobytes() == cap.kv[layer][0].tobytes()
            assert vm.tobytes() == cap.kv[layer][1].tobytes()


def test_registry_mismatch_is_contract_error(micro_params, micro_arch, images, rng):
    obj, ref = images
    bundle = _bundle(micro_params, micro_arch, obj, ref, rng)
    with pytest.raises(ContractError):
        tri_stream_denoise_step(bundle, micro_params, micro_arch, MixWeights.zeros(S - 2, 2), SamplerConfig(), 100)


def test_latent_replacement_at_t0_is_exact(micro_params, micro_arch, images, rng):
    obj, ref = images
    clean = dn.to_signal(rng.uniform(0, 1, (2, 16, 16, 3)))
    bundle = _bundle(micro_params, micro_arch, obj, ref, rng, t=0)
    out = reference_latent_replacement(clean, bundle, dn.NoiseSchedule(), np.random.default_rng(1))
    assert out.reference.x.tobytes() == clean.tobytes()
    with pytest.raises(ContractError):
        reference_latent_replacement(clean[:1], bundle, dn.NoiseSchedule(), np.random.default_rng(1))


def test_latent_replacement_overwrites_reference_state(micro_params, micro_arch, images, rng):
    obj, ref = images
    clean = dn.to_signal(rng.uniform(0, 1, (2, 16, 16, 3)))
    a = _bundle(micro_params, micro_arch, obj, ref, np.random.default_rng(5), clean_reference=clean)
    b = _bundle(micro_params, micro_arch, obj, ref, np.random.default_rng(5), clean_reference=clean)
    b.reference.x = np.full_like(b.reference.x, 7.0)   # whatever the stream held before
    mw = MixWeights(rng.normal(size=(S, 2, 3)))
    na = tri_stream_denoise_step(a, micro_params, micro_arch, mw, SamplerConfig(), 80)
    nb = tri_stream_denoise_step(b, micro_params, micro_arch, mw, SamplerConfig(), 80)
    assert na.main.x.tobytes() == nb.main.x.tobytes()
    assert na.reference.x.tobytes() == nb.reference.x.tobytes()


def test_multiview_reference_end_state(micro_params, micro_arch, images, rng):
    obj, _ = images
    ref_views = rng.uniform(0, 1, (2, 16, 16, 3))
    res = sample_transfer(obj, ref_views, micro_params, micro_arch, MixWeights.zeros(S, 2),
                          SamplerConfig(steps=STEPS), seed=2)
    np.testing.assert_allclose(res.reference, dn.to_images(dn.to_signal(ref_views)), atol=1e-6)
    with pytest.raises(ContractError):
        sample_transfer(obj, ref_views[:1], micro_params, micro_arch, MixWeights.zeros(S, 2))


def test_transfer_reproducible_and_extra_frame(micro_params, micro_arch, images, rng):
    obj, ref = images
    mw = MixWeights(rng.normal(size=(S, 2, 3)))
    cfg = SamplerConfig(steps=STEPS)
    a = sample_transfer(obj, ref, micro_params, micro_arch, mw, cfg, seed=4)
    b = sample_transfer(obj, ref, micro_params, micro_arch, mw, cfg, seed=4)
    assert a.main.tobytes() == b.main.tobytes()
    c = sample_transfer(obj, ref, micro_params, micro_arch, mw, SamplerConfig(steps=STEPS, extra_frame=True), seed=4)
    assert c.main.shape == a.main.shape
    assert c.main.tobytes() != a.main.tobytes()
    d = sample_transfer(obj, ref, micro_params, micro_arch, mw,
                        SamplerConfig(steps=STEPS, shared_init_noise=False), seed=4)
    # independent starts: the object stream then begins from seed + 1
    solo = dn.sample(micro_params, micro_arch, obj, cfg_scale=2.0, steps=STEPS, seed=5)
    assert d.object.tobytes() == solo.tobytes() != a.object.tobytes()


def test_transfer_contract_errors(micro_params, micro_arch, images):
    obj, ref = images
    with pytest.raises(ContractError):
        sample_transfer(obj, ref, micro_params, micro_arch, None)
    with pytest.raises(ContractError):
        sample_transfer(obj[:8], ref, micro_params, micro_arch, MixWeights.zeros(S, 2))
    with pytest.raises(ContractError):
        SamplerConfig(cfg_main=-1)


def test_mixweights_save_load(tmp_path, rng):
    mw = MixWeights(rng.normal(size=(S, 1, 3)), per_frame=False, streams=(False, True, True), frames=4)
    mw.save(tmp_path / "m.tmx")
    got = MixWeights.load(tmp_path / "m.tmx")
    assert got.logits.tobytes() == mw.logits.tobytes()
    assert (got.per_frame, got.streams, got.frames) == (False, (False, True, True), 4)
