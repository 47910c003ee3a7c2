"""Three-stream sampling with learnable key/value mixing.

Three denoising trajectories share the frozen base weights:

* the object stream, conditioned on the object image,
* the reference stream, conditioned on the appearance reference,
* the main stream, whose self-attention layers use its own queries against
  keys/values mixed from all three streams::

      K_mix[f] = a_o(l, f) K_o[f] + a_r(l, f) K_r[f] + a_m(l, f) K_m[f]

  (same weights for V), where ``(a_o, a_r, a_m)`` is the softmax of a
  per-layer, per-frame logit triple.

Only the main stream is hooked; the side streams run the plain denoiser and
publish the K/V of their conditional pass, which the main stream consumes in
both its conditional and unconditional passes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import checkpoint
from . import denoiser as dn
from . import tensor as tn
from .tensor import Tensor

STREAMS = ("object", "reference", "main")
# argmax tie-break priority: main, then object, then reference
_PRIORITY = (2, 0, 1)
_MASKED = -1e9


class ContractError(ValueError):
    pass


@dataclass
class MixWeights:
    """Mixing logits of shape (S, F, 3), or (S, 1, 3) when not per frame.

    ``streams`` switches individual streams off; a disabled stream always
    gets weight exactly zero.
    """

    logits: np.ndarray
    per_frame: bool = True
    streams: tuple[bool, bool, bool] = (True, True, True)
    frames: int = 0

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float32)
        if self.logits.ndim != 3 or self.logits.shape[2] != 3:
            raise ContractError(f"mix logits must have shape (S, F, 3), got {self.logits.shape}")
        if not self.per_frame and self.logits.shape[1] != 1:
            raise ContractError("shared-over-frames logits must have shape (S, 1, 3)")
        if not self.frames:
            self.frames = self.logits.shape[1]
        if self.per_frame and self.logits.shape[1] != self.frames:
            raise ContractError("per-frame logits must have one row per frame")
        if not any(self.streams):
            raise ContractError("at least one stream must be enabled")
        self.streams = tuple(bool(s) for s in self.streams)
        if not np.isfinite(self.logits).all():
            raise ContractError("mix logits must be finite")

    @classmethod
    def zeros(cls, layers: int, frames: int, per_frame: bool = True, streams=(True, True, True)):
        return cls(np.zeros((layers, frames if per_frame else 1, 3)), per_frame, streams, frames)

    @classmethod
    def constant(cls, layers: int, frames: int, stream_per_layer, strength: float = 1e4):
        """Saturated weights: layer ``l`` uses only stream ``stream_per_layer[l]``."""
        logits = np.full((layers, frames, 3), -strength, dtype=np.float32)
        for l, s in enumerate(stream_per_layer):
            logits[l, :, STREAMS.index(s) if isinstance(s, str) else s] = 0.0
        return cls(logits, True, (True, True, True), frames)

    @property
    def layers(self) -> int:
        return self.logits.shape[0]

    @property
    def trainable_count(self) -> int:
        return int(self.logits.size)

    def mask(self) -> np.ndarray:
        return np.array([0.0 if s else _MASKED for s in self.streams], dtype=np.float32)

    def alpha_table(self) -> np.ndarray:
        """(S, F, 3) array of softmax weights."""
        z = self.logits + self.mask()
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        a = e / e.sum(axis=-1, keepdims=True)
        return np.broadcast_to(a, (self.layers, self.frames, 3)).copy()

    def save(self, path, extra: dict | None = None) -> None:
        meta = {"kind": "mix", "per_frame": self.per_frame, "streams": list(self.streams),
                "frames": self.frames, "layers": list(dn.ATTENTION_LAYERS)}
        if extra:
            meta.update(extra)
        checkpoint.save(path, {"mix.logits": self.logits}, config=meta)

    @classmethod
    def load(cls, path) -> "MixWeights":
        arrays, meta = checkpoint.load(path, required=["mix.logits"])
        meta = meta or {}
        return cls(arrays["mix.logits"], meta.get("per_frame", True),
                   tuple(meta.get("streams", (True, True, True))), meta.get("frames", 0))


def alphas_from_logits(mw: MixWeights, layer: int, frame: int) -> tuple[float, float, float]:
    if not 0 <= layer < mw.layers:
        raise IndexError(f"layer {layer} out of range [0, {mw.layers})")
    if not 0 <= frame < mw.frames:
        raise IndexError(f"frame {frame} out of range [0, {mw.frames})")
    row = mw.logits[layer, frame if mw.per_frame else 0] + mw.mask()
    with tn.float64_mode():
        a = tn.softmax(Tensor(row), axis=0).data
    return tuple(float(x) for x in a)


def argmax_select(alphas) -> tuple[float, float, float]:
    """One-hot on the largest weight; ties resolved main > object > reference."""
    a = [float(x) for x in alphas]
    best = max(a)
    for idx in _PRIORITY:
        if a[idx] == best:
            out = [0.0, 0.0, 0.0]
            out[idx] = 1.0
            return tuple(out)
    raise ValueError(f"invalid alpha triple {alphas}")


def argmax_table(table: np.ndarray) -> np.ndarray:
    out = np.zeros_like(table)
    for idx in np.ndindex(table.shape[:-1]):
        out[idx] = argmax_select(table[idx])
    return out


def layer_alphas(logits: Tensor, mw: MixWeights, layer: int, cameras, argmax: bool = False) -> Tensor:
    """(len(cameras), 3) differentiable weights for one layer, one row per frame."""
    if argmax:
        table = mw.alpha_table()[layer]
        rows = np.array([argmax_select(table[c]) for c in cameras], dtype=logits.dtype)
        return Tensor(rows, dtype=logits.dtype)
    fp = logits.shape[1]
    row = tn.reshape(tn.narrow(logits, 0, layer, layer + 1), (fp, 3))
    mask = Tensor(np.tile(mw.mask(), (fp, 1)), dtype=logits.dtype)
    a = tn.softmax(tn.add(row, mask), axis=-1)
    idx = [c for c in cameras] if mw.per_frame else [0] * len(cameras)
    return tn.take_rows(a, idx)


def mix_kv(k_o, k_r, k_m, v_o, v_r, v_m, alphas: Tensor, frames: int,
           enabled: tuple[bool, bool, bool] = (True, True, True)):
    """Per-frame convex combination of three streams' keys and values.

    Token tensors are (frames * tokens_per_frame, C) with frames contiguous;
    ``alphas`` is (frames, 3). Disabled streams are skipped (their weight is 0).
    """
    ks, vs = (k_o, k_r, k_m), (v_o, v_r, v_m)
    shape = next(t.shape for t in ks if t is not None)
    for t in ks + vs:
        if t is not None and t.shape != shape:
            raise tn.ShapeError(f"mix_kv: token shapes differ ({t.shape} vs {shape})")
    if shape[0] % frames:
        raise tn.ShapeError(f"mix_kv: {shape[0]} tokens do not split into {frames} frames")
    if alphas.shape != (frames, 3):
        raise tn.ShapeError(f"mix_kv: alphas {alphas.shape} != ({frames}, 3)")
    per = (frames, shape[0] // frames, shape[1])
    cols = tn.transpose(alphas, (1, 0))

    def combine(xs):
        acc = None
        for i, x in enumerate(xs):
            if not enabled[i]:
                continue
            w = tn.reshape(tn.narrow(cols, 0, i, i + 1), (frames,))
            term = tn.scale_rows(tn.reshape(x, per), w)
            acc = term if acc is None else tn.add(acc, term)
        return tn.reshape(acc, shape)

    return combine(ks), combine(vs)


class KVCapture:
    """Hook that records each layer's keys/values and passes them through."""

    def __init__(self):
        self.kv: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def __call__(self, layer, k, v):
        self.kv[layer] = (k.data, v.data)
        return k, v


class MainStreamMixer:
    """Hook for the main stream: replaces K/V by the mixed K/V."""

    def __init__(self, mw: MixWeights, logits: Tensor, cameras, obj: KVCapture | None,
                 ref: KVCapture | None, argmax: bool = False, trace: dict | None = None):
        self.mw, self.logits, self.cameras = mw, logits, list(cameras)
        self.obj, self.ref, self.argmax, self.trace = obj, ref, argmax, trace
        self._alphas: dict[int, Tensor] = {}

    def alphas(self, layer: int) -> Tensor:
        if layer not in self._alphas:
            self._alphas[layer] = layer_alphas(self.logits, self.mw, layer, self.cameras, self.argmax)
        return self._alphas[layer]

    def __call__(self, layer, k, v):
        dt = k.dtype

        def side(cap):
            if cap is None:
                return None, None
            kk, vv = cap.kv[layer]
            return Tensor(kk, dtype=dt), Tensor(vv, dtype=dt)

        k_o, v_o = side(self.obj) if self.mw.streams[0] else (None, None)
        k_r, v_r = side(self.ref) if self.mw.streams[1] else (None, None)
        enabled = (k_o is not None, k_r is not None, self.mw.streams[2])
        km, vm = mix_kv(k_o, k_r, k if enabled[2] else None, v_o, v_r, v if enabled[2] else None,
                        self.alphas(layer), len(self.cameras), enabled)
        if self.trace is not None:
            self.trace.setdefault(layer, []).append((km.data, vm.data))
        return km, vm


def check_registry(mw: MixWeights, arch: dn.DenoiserConfig) -> None:
    if mw.layers != len(dn.ATTENTION_LAYERS):
        raise ContractError(f"mix weights cover {mw.layers} layers, model has {len(dn.ATTENTION_LAYERS)}")
    if mw.frames != arch.views:
        raise ContractError(f"mix weights cover {mw.frames} frames, model generates {arch.views}")


# -------------------------------------------------------------------- sampling


@dataclass
class SamplerConfig:
    cfg_main: float = 5.0
    cfg_object: float = 2.0
    cfg_reference: float = 2.0
    argmax_select: bool = False
    unconditional_main: bool = True
    extra_frame: bool = False
    shared_init_noise: bool = True
    steps: int = 50

    def __post_init__(self):
        if min(self.cfg_main, self.cfg_object, self.cfg_reference) < 0:
            raise ContractError("CFG scales must be non-negative")


@dataclass
class Stream:
    x: np.ndarray
    cond: np.ndarray | None        # [-1, 1] concat image or None
    emb: Tensor
    scale: float


@dataclass
class StreamBundle:
    object: Stream
    reference: Stream
    main: Stream
    t: int
    cameras: tuple[int, ...]
    clean_reference: np.ndarray | None = None    # (F, H, W, 3) in [-1, 1] for latent replacement
    ref_rng: np.random.Generator | None = field(default=None, repr=False)


def reference_latent_replacement(multiview_reference: np.ndarray, bundle: StreamBundle,
                                 schedule: dn.NoiseSchedule, rng: np.random.Generator) -> StreamBundle:
    """Overwrite the reference state with the given clean frames noised to ``bundle.t``."""
    ref = np.asarray(multiview_reference, dtype=bundle.reference.x.dtype)
    if ref.shape != bundle.reference.x.shape:
        raise ContractError(f"multiview reference has shape {ref.shape}, stream expects {bundle.reference.x.shape}")
    eps = rng.standard_normal(ref.shape, dtype=np.float32).astype(ref.dtype)
    new_ref = replace(bundle.reference, x=schedule.forward_noise(ref, bundle.t, eps))
    return replace(bundle, reference=new_ref)


def _guided(params, arch, stream: Stream, t, cams, hook_c=None, hook_u=None):
    x = Tensor(stream.x, dtype=stream.x.dtype)
    ec = dn.predict_eps(params, arch, x, stream.cond, stream.emb, t, cams, hook=hook_c).data
    if stream.scale == 1:
        return ec
    null = dn.null_embedding(arch, stream.x.dtype)
    eu = dn.predict_eps(params, arch, x, None, null, t, cams, hook=hook_u).data
    return dn.cfg_combine(ec, eu, stream.scale)


def tri_stream_denoise_step(bundle: StreamBundle, params, arch: dn.DenoiserConfig, mw: MixWeights,
                            cfg: SamplerConfig, t_next: int, schedule: dn.NoiseSchedule | None = None,
                            trace: dict | None = None) -> StreamBundle:
    check_registry(mw, arch)
    sched = schedule or dn.NoiseSchedule.from_config(arch)
    t, cams = bundle.t, bundle.cameras
    if bundle.clean_reference is not None:
        bundle = reference_latent_replacement(bundle.clean_reference, bundle, sched, bundle.ref_rng)

    with tn.no_grad():
        cap_o, cap_r = KVCapture(), KVCapture()
        eps_o = _guided(params, arch, bundle.object, t, cams, hook_c=cap_o)
        eps_r = _guided(params, arch, bundle.reference, t, cams, hook_c=cap_r)
        logits = Tensor(mw.logits, dtype=bundle.main.x.dtype)
        mixer = MainStreamMixer(mw, logits, cams, cap_o, cap_r, cfg.argmax_select, trace)
        eps_m = _guided(params, arch, bundle.main, t, cams, hook_c=mixer, hook_u=mixer)

    step = lambda s, e: replace(s, x=sched.ddim_step(s.x, e, t, t_next))
    ref_next = step(bundle.reference, eps_r)
    if bundle.clean_reference is not None and t_next == 0:
        ref_next = replace(ref_next, x=np.array(bundle.clean_reference, copy=True))
    return replace(bundle, object=step(bundle.object, eps_o), reference=ref_next,
                   main=step(bundle.main, eps_m), t=t_next)


@dataclass
class TransferResult:
    main: np.ndarray          # (F, H, W, 3) in [0, 1]
    object: np.ndarray
    reference: np.ndarray


def sample_transfer(object_image: np.ndarray, reference_image: np.ndarray, params, arch: dn.DenoiserConfig,
                    mw: MixWeights | None, cfg: SamplerConfig | None = None, seed: int = 0,
                    trace: dict | None = None) -> TransferResult:
    """Appearance transfer. ``reference_image`` is either one (H, W, 3) image or
    (F, H, W, 3) views, the latter enabling latent replacement. Images in [0, 1]."""
    if mw is None:
        raise ContractError("sample_transfer needs trained mix weights")
    cfg = cfg or SamplerConfig()
    check_registry(mw, arch)
    res = (arch.resolution, arch.resolution, 3)
    obj_img = np.asarray(object_image)
    ref_in = np.asarray(reference_image)
    if obj_img.shape != res:
        raise ContractError(f"object image shape {obj_img.shape} != {res}")
    multiview = ref_in.ndim == 4
    if multiview:
        if ref_in.shape != (arch.views,) + res:
            raise ContractError(f"multiview reference must have {arch.views} frames at {res}, got {ref_in.shape}")
        ref_img = ref_in[0]
    else:
        if ref_in.shape != res:
            raise ContractError(f"reference image shape {ref_in.shape} != {res}")
        ref_img = ref_in

    sched = dn.NoiseSchedule.from_config(arch)
    cams = tuple(range(arch.views)) + ((0,) if cfg.extra_frame else ())
    frames = len(cams)
    obj_c, ref_c = dn.to_signal(obj_img), dn.to_signal(ref_img)
    with tn.no_grad():
        e_o = dn.encode_condition(params, arch, obj_c)
        e_r = dn.encode_condition(params, arch, ref_c)
        e_m = tn.scale(tn.add(e_o, e_r), 0.5) if cfg.unconditional_main else e_o

    x0 = dn.initial_noise(arch, seed, frames)
    if cfg.shared_init_noise:
        xs = (x0, x0.copy(), x0.copy())
    else:
        xs = (dn.initial_noise(arch, seed + 1, frames), dn.initial_noise(arch, seed + 2, frames), x0)
    clean_ref = None
    if multiview:
        clean_ref = dn.to_signal(ref_in)
        if cfg.extra_frame:
            clean_ref = np.concatenate([clean_ref, clean_ref[:1]])
    bundle = StreamBundle(
        object=Stream(xs[0], obj_c, e_o, cfg.cfg_object),
        reference=Stream(xs[1], ref_c, e_r, cfg.cfg_reference),
        main=Stream(xs[2], None if cfg.unconditional_main else obj_c, e_m, cfg.cfg_main),
        t=sched.T, cameras=cams, clean_reference=clean_ref,
        ref_rng=np.random.default_rng([seed, 7]),
    )
    for t, t_next in sched.ddim_timesteps(cfg.steps):
        bundle = tri_stream_denoise_step(bundle, params, arch, mw, cfg, t_next, sched, trace)
    keep = slice(0, arch.views)
    return TransferResult(main=dn.to_images(bundle.main.x[keep]), object=dn.to_images(bundle.object.x[keep]),
                          reference=dn.to_images(bundle.reference.x[keep]))
