"""Tiny image-to-multiview denoiser.

A U-Net over F frames at once. Convolutions treat frames as a batch; every
self-attention layer flattens the tokens of *all* frames into one sequence
(joint view-spatial attention), which is what ties the views together.
Frames are told apart by a learned per-layer camera embedding added to the
tokens. Conditioning is twofold: the RGB conditioning image is concatenated
to every frame's input channels, and a global embedding from a small conv
encoder is added alongside the timestep embedding in every residual block.

Attention layers accept a hook ``hook(layer, k, v) -> (k, v)`` that sees the
keys/values right before attention and may replace them; the three-stream
sampler is built on that.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import checkpoint
from . import tensor as tn
from .tensor import Tensor

Hook = Callable[[int, Tensor, Tensor], tuple]


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class DenoiserConfig:
    resolution: int = 32
    views: int = 4
    channels: tuple[int, int, int] = (32, 64, 128)
    emb_dim: int = 64
    groups: int = 8
    embedder_channels: tuple[int, int] = (16, 32)
    T: int = 200
    # 1e-4..0.02 stretched by 2.5: at T=200 the unstretched ramp would end at
    # alpha_bar ~ 0.13, far from the pure-noise start of the sampler
    beta_start: float = 2.5e-4
    beta_end: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "embedder_channels", tuple(self.embedder_channels))
        if self.resolution % 4:
            raise ValueError("resolution must be divisible by 4")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(**d)


MICRO_CONFIG = DenoiserConfig(resolution=16, views=2, channels=(8, 16, 16), emb_dim=16,
                              groups=4, embedder_channels=(8, 8))

# forward order of the self-attention layers
ATTENTION_LAYERS = ("enc1.attn", "enc2.attn", "mid.attn", "dec2.attn", "dec1.attn")
# the upsampling path plus bottleneck
DECODER_SIDE_LAYERS = (2, 3, 4)


class NoiseSchedule:
    """Linear-beta DDPM schedule.

    Index 0 is the clean signal (``alpha_bar[0] == 1``); indices 1..T are the
    T noise levels, ``alpha_bar[t] = prod_{s<=t} (1 - beta_s)``.
    """

    def __init__(self, T: int = 200, beta_start: float = 2.5e-4, beta_end: float = 0.05):
        self.T = int(T)
        self.betas = np.linspace(beta_start, beta_end, self.T, dtype=np.float64)
        if not (0 < self.betas.min() and self.betas.max() < 1):
            raise ValueError("betas must lie in (0, 1)")
        self.alphas = 1.0 - self.betas
        self.alpha_bar = np.concatenate([[1.0], np.cumprod(self.alphas)])

    @classmethod
    def from_config(cls, cfg: DenoiserConfig) -> "NoiseSchedule":
        return cls(cfg.T, cfg.beta_start, cfg.beta_end)

    def _check(self, t: int) -> None:
        if not 0 <= t <= self.T:
            raise IndexError(f"timestep {t} outside schedule range [0, {self.T}]")

    def forward_noise(self, x0: np.ndarray, t: int, eps: np.ndarray) -> np.ndarray:
        if x0.shape != eps.shape:
            raise tn.ShapeError(f"forward_noise: x0 {x0.shape} vs eps {eps.shape}")
        self._check(t)
        if t == 0:
            return np.array(x0, copy=True)
        ab = self.alpha_bar[t]
        dt = x0.dtype
        return (dt.type(math.sqrt(ab)) * x0 + dt.type(math.sqrt(1 - ab)) * eps).astype(dt)

    def ddim_step(self, x_t: np.ndarray, eps_hat: np.ndarray, t: int, t_next: int) -> np.ndarray:
        self._check(t)
        self._check(t_next)
        if t_next > t:
            raise ValueError(f"ddim_step goes backwards in noise: t={t}, t_next={t_next}")
        if t_next == t:
            return np.array(x_t, copy=True)
        dt = x_t.dtype
        ab, abn = self.alpha_bar[t], self.alpha_bar[t_next]
        x0 = (x_t - dt.type(math.sqrt(1 - ab)) * eps_hat) / dt.type(math.sqrt(ab))
        x0 = np.clip(x0, -1.0, 1.0).astype(dt)
        if t_next == 0:
            return x0
        return (dt.type(math.sqrt(abn)) * x0 + dt.type(math.sqrt(1 - abn)) * eps_hat).astype(dt)

    def ddim_timesteps(self, steps: int) -> list[tuple[int, int]]:
        ts = np.round(np.linspace(self.T, 0, steps + 1)).astype(int)
        return [(int(a), int(b)) for a, b in zip(ts[:-1], ts[1:]) if a != b]


def cfg_combine(eps_cond: np.ndarray, eps_uncond: np.ndarray, w: float) -> np.ndarray:
    if eps_cond.shape != eps_uncond.shape:
        raise tn.ShapeError("cfg_combine: shape mismatch")
    if w == 1:
        return eps_cond
    if w == 0:
        return eps_uncond
    dt = eps_cond.dtype
    return eps_uncond + dt.type(w) * (eps_cond - eps_uncond)


@dataclass
class MultiviewState:
    x: np.ndarray                       # (F, H, W, 3)
    t: int
    cameras: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if not self.cameras:
            self.cameras = tuple(range(self.x.shape[0]))


# ----------------------------------------------------------------- parameters


def _param_shapes(cfg: DenoiserConfig) -> dict[str, tuple]:
    c0, c1, c2 = cfg.channels
    d = cfg.emb_dim
    e0, e1 = cfg.embedder_channels
    shapes: dict[str, tuple] = {
        "time.w1": (d, d), "time.b1": (d,), "time.w2": (d, d), "time.b2": (d,),
        "embed.conv1.w": (3, 3, 3, e0), "embed.conv1.b": (e0,),
        "embed.conv2.w": (3, 3, e0, e1), "embed.conv2.b": (e1,),
        "embed.out.w": (e1, d), "embed.out.b": (d,),
        "conv_in.w": (3, 3, 6, c0), "conv_in.b": (c0,),
        "down0.w": (3, 3, c0, c0), "down0.b": (c0,),
        "down1.w": (3, 3, c1, c1), "down1.b": (c1,),
        "out.norm.g": (c0,), "out.norm.b": (c0,),
        "out.conv.w": (3, 3, c0, 3), "out.conv.b": (3,),
        "out.gate.w": (d, 3), "out.gate.b": (3,),
    }

    def res(name, cin, cout):
        shapes.update({
            f"{name}.norm1.g": (cin,), f"{name}.norm1.b": (cin,),
            f"{name}.conv1.w": (3, 3, cin, cout), f"{name}.conv1.b": (cout,),
            f"{name}.emb.w": (d, cout), f"{name}.emb.b": (cout,),
            f"{name}.norm2.g": (cout,), f"{name}.norm2.b": (cout,),
            f"{name}.conv2.w": (3, 3, cout, cout), f"{name}.conv2.b": (cout,),
        })
        if cin != cout:
            shapes.update({f"{name}.skip.w": (1, 1, cin, cout), f"{name}.skip.b": (cout,)})

    def attn(name, c):
        shapes.update({
            f"{name}.norm.g": (c,), f"{name}.norm.b": (c,),
            f"{name}.cam": (cfg.views, c),
            f"{name}.q.w": (c, c), f"{name}.q.b": (c,),
            f"{name}.k.w": (c, c), f"{name}.k.b": (c,),
            f"{name}.v.w": (c, c), f"{name}.v.b": (c,),
            f"{name}.o.w": (c, c), f"{name}.o.b": (c,),
        })

    res("enc0", c0, c0)
    res("enc1", c0, c1); attn("enc1.attn", c1)
    res("enc2", c1, c2); attn("enc2.attn", c2)
    res("mid", c2, c2); attn("mid.attn", c2)
    res("dec2", c2 + c2, c2); attn("dec2.attn", c2)
    res("dec1", c2 + c1, c1); attn("dec1.attn", c1)
    res("dec0", c1 + c0, c0)
    return shapes


def param_names(cfg: DenoiserConfig) -> list[str]:
    return sorted(_param_shapes(cfg))


def init_params(cfg: DenoiserConfig, seed: int = 0, zero_init: bool = True) -> dict[str, Tensor]:
    """Fresh weights. With ``zero_init`` the output conv, the input gate, each
    residual block's second conv and each attention output projection start at zero,
    so that the network initially predicts zero noise."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in sorted(_param_shapes(cfg).items()):
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif leaf == "b":
            arr = np.zeros(shape)
        elif name.endswith(".cam"):
            arr = rng.normal(0, 0.5, shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            arr = rng.normal(0, 1.0 / math.sqrt(fan_in), shape)
            if zero_init and (name in ("out.conv.w", "out.gate.w") or name.endswith("conv2.w")
                              or name.endswith(".o.w")):
                arr = np.zeros(shape)
        params[name] = Tensor(arr.astype(np.float32), requires_grad=False)
    return params


def cast_params(params: dict[str, Tensor], dtype) -> dict[str, Tensor]:
    return {k: Tensor(v.data.astype(dtype), dtype=dtype) for k, v in params.items()}


def save_params(path, params: dict[str, Tensor], cfg: DenoiserConfig, extra: dict | None = None) -> None:
    meta = {"kind": "denoiser", "architecture": cfg.to_dict()}
    if extra:
        meta.update(extra)
    checkpoint.save(path, {k: v.data for k, v in params.items()}, config=meta)


def load_params(path) -> tuple[dict[str, Tensor], DenoiserConfig]:
    arrays, meta = checkpoint.load(path)
    if not meta or "architecture" not in meta:
        raise checkpoint.CheckpointError(f"{path}: no architecture config entry")
    cfg = DenoiserConfig.from_dict(meta["architecture"])
    missing = [n for n in param_names(cfg) if n not in arrays]
    if missing:
        raise checkpoint.CheckpointError(f"{path}: missing tensors: {', '.join(missing)}")
    return {n: Tensor(arrays[n]) for n in param_names(cfg)}, cfg


# -------------------------------------------------------------------- forward


def timestep_features(t: int, dim: int, dtype) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(1000.0) * np.arange(half) / half)
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)]).astype(dtype)


def _check_finite(x: Tensor, where: str) -> Tensor:
    if not np.isfinite(x.data).all():
        raise NumericError(f"non-finite activation in {where}")
    return x


class _Net:
    def __init__(self, params: dict[str, Tensor], cfg: DenoiserConfig):
        self.p = params
        self.cfg = cfg

    def conv(self, name, x, stride=1):
        return tn.conv2d(x, self.p[f"{name}.w"], self.p[f"{name}.b"], stride=stride)

    def norm_act(self, name, x):
        return tn.silu(tn.group_norm(x, self.p[f"{name}.g"], self.p[f"{name}.b"], self.cfg.groups))

    def resblock(self, name, x, emb_act):
        p = self.p
        h = self.conv(f"{name}.conv1", self.norm_act(f"{name}.norm1", x))
        e = tn.linear(emb_act, p[f"{name}.emb.w"], p[f"{name}.emb.b"])
        h = tn.add_bias(h, tn.reshape(e, (e.shape[1],)))
        h = self.conv(f"{name}.conv2", self.norm_act(f"{name}.norm2", h))
        skip = self.conv(f"{name}.skip", x) if f"{name}.skip.w" in p else x
        return _check_finite(tn.add(skip, h), name)

    def attention(self, name, layer, x, cams, hook):
        p = self.p
        f, h, w, c = x.shape
        n = tn.group_norm(x, p[f"{name}.norm.g"], p[f"{name}.norm.b"], self.cfg.groups)
        tok = tn.add_rowvec(tn.reshape(n, (f, h * w, c)), tn.take_rows(p[f"{name}.cam"], cams))
        tok = tn.reshape(tok, (f * h * w, c))
        q = tn.linear(tok, p[f"{name}.q.w"], p[f"{name}.q.b"])
        k = tn.linear(tok, p[f"{name}.k.w"], p[f"{name}.k.b"])
        v = tn.linear(tok, p[f"{name}.v.w"], p[f"{name}.v.b"])
        if hook is not None:
            k, v = hook(layer, k, v)
        a = tn.scaled_dot_attention(q, k, v)
        o = tn.linear(a, p[f"{name}.o.w"], p[f"{name}.o.b"])
        return _check_finite(tn.add(x, tn.reshape(o, (f, h, w, c))), name)

    def gated_input(self, x, temb):
        # per-channel, time-dependent copy of the noisy input; at high noise
        # eps is mostly x itself and the conv stack alone cannot pass it
        # through precisely enough. Zero-initialised.
        g = tn.linear(tn.silu(tn.reshape(temb, (1, self.cfg.emb_dim))), self.p["out.gate.w"], self.p["out.gate.b"])
        f, h, w, c = x.shape
        cols = tn.transpose(tn.reshape(x, (f * h * w, c)), (1, 0))
        cols = tn.scale_rows(cols, tn.reshape(g, (c,)))
        return tn.reshape(tn.transpose(cols, (1, 0)), x.shape)

    def embed_time(self, t, dtype):
        p = self.p
        feats = Tensor(timestep_features(t, self.cfg.emb_dim, dtype)[None], dtype=dtype)
        h = tn.silu(tn.linear(feats, p["time.w1"], p["time.b1"]))
        return tn.reshape(tn.linear(h, p["time.w2"], p["time.b2"]), (self.cfg.emb_dim,))

    def forward(self, x: Tensor, t: int, cond_image, emb: Tensor, cams, hook=None) -> Tensor:
        f = x.shape[0]
        dt = x.dtype
        cond = np.zeros(x.shape, dtype=dt) if cond_image is None else \
            np.broadcast_to(np.asarray(cond_image, dtype=dt), x.shape)
        inp = tn.concat([x, Tensor(cond, dtype=dt)], axis=3)
        temb = self.embed_time(t, dt)
        emb_act = tn.silu(tn.reshape(tn.add(temb, emb), (1, self.cfg.emb_dim)))

        h0 = self.resblock("enc0", self.conv("conv_in", inp), emb_act)
        h = self.conv("down0", h0, stride=2)
        h1 = self.attention("enc1.attn", 0, self.resblock("enc1", h, emb_act), cams, hook)
        h = self.conv("down1", h1, stride=2)
        h2 = self.attention("enc2.attn", 1, self.resblock("enc2", h, emb_act), cams, hook)
        h = self.attention("mid.attn", 2, self.resblock("mid", h2, emb_act), cams, hook)
        h = self.attention("dec2.attn", 3, self.resblock("dec2", tn.concat([h, h2], 3), emb_act), cams, hook)
        h = tn.upsample2x(h)
        h = self.attention("dec1.attn", 4, self.resblock("dec1", tn.concat([h, h1], 3), emb_act), cams, hook)
        h = tn.upsample2x(h)
        h = self.resblock("dec0", tn.concat([h, h0], 3), emb_act)
        out = self.conv("out.conv", self.norm_act("out.norm", h))
        if out.shape != x.shape:
            raise tn.ShapeError(f"output shape {out.shape} != input {x.shape}")
        out = tn.add(out, self.gated_input(x, temb))
        return _check_finite(out, "out")

    def encode(self, image: Tensor) -> Tensor:
        p = self.p
        h = tn.silu(tn.conv2d(image, p["embed.conv1.w"], p["embed.conv1.b"], stride=2))
        h = tn.silu(tn.conv2d(h, p["embed.conv2.w"], p["embed.conv2.b"], stride=2))
        _, hh, ww, c = h.shape
        pool = Tensor(np.full((1, hh * ww), 1.0 / (hh * ww)), dtype=h.dtype)
        h = tn.matmul(pool, tn.reshape(h, (hh * ww, c)))
        return tn.reshape(tn.linear(h, p["embed.out.w"], p["embed.out.b"]), (self.cfg.emb_dim,))


def to_signal(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    """[0, 1] images -> [-1, 1] diffusion signal."""
    return (np.asarray(images, dtype=dtype) * 2 - 1).astype(dtype)


def to_images(x: np.ndarray) -> np.ndarray:
    return np.clip((np.asarray(x) + 1) / 2, 0.0, 1.0)


def predict_eps(params: dict[str, Tensor], cfg: DenoiserConfig, state: MultiviewState | Tensor,
                cond_image: np.ndarray | None, emb: Tensor, t: int | None = None,
                cameras: Sequence[int] | None = None, hook: Hook | None = None) -> Tensor:
    """Noise prediction for all frames of ``state``.

    ``cond_image`` is a [-1, 1] (H, W, 3) image concatenated to every frame,
    or None for zeroed conditioning channels. ``state`` is either a
    :class:`MultiviewState` or an (F, H, W, 3) tensor together with ``t``.
    """
    if isinstance(state, MultiviewState):
        x = Tensor(state.x, dtype=state.x.dtype)
        t, cameras = state.t, state.cameras
    else:
        x = state
    if cameras is None:
        cameras = tuple(range(x.shape[0]))
    if x.shape[1:] != (cfg.resolution, cfg.resolution, 3):
        raise tn.ShapeError(f"state shape {x.shape} does not match resolution {cfg.resolution}")
    if cond_image is not None and np.shape(cond_image) != (cfg.resolution, cfg.resolution, 3):
        raise tn.ShapeError(f"conditioning image shape {np.shape(cond_image)} mismatched")
    if emb.shape != (cfg.emb_dim,):
        raise tn.ShapeError(f"embedding shape {emb.shape} != ({cfg.emb_dim},)")
    return _Net(params, cfg).forward(x, int(t), cond_image, emb, list(cameras), hook)


def encode_condition(params: dict[str, Tensor], cfg: DenoiserConfig, image: np.ndarray | Tensor) -> Tensor:
    """Embedding of a [-1, 1] (H, W, 3) conditioning image."""
    img = image if isinstance(image, Tensor) else Tensor(image)
    if img.shape != (cfg.resolution, cfg.resolution, 3):
        raise tn.ShapeError(f"conditioning image shape {img.shape} does not match resolution {cfg.resolution}")
    return _Net(params, cfg).encode(tn.reshape(img, (1,) + img.shape))


def null_embedding(cfg: DenoiserConfig, dtype=None) -> Tensor:
    return Tensor(np.zeros(cfg.emb_dim), dtype=dtype or tn.default_dtype())


def sample(params: dict[str, Tensor], cfg: DenoiserConfig, cond_image: np.ndarray, *,
           cfg_scale: float = 2.0, steps: int = 50, seed: int = 0,
           cameras: Sequence[int] | None = None) -> np.ndarray:
    """Standalone single-stream DDIM sampler. ``cond_image`` in [0, 1];
    returns (F, H, W, 3) images in [0, 1]."""
    sched = NoiseSchedule.from_config(cfg)
    cams = tuple(cameras) if cameras is not None else tuple(range(cfg.views))
    cond = to_signal(cond_image)
    with tn.no_grad():
        emb = encode_condition(params, cfg, cond)
        null = null_embedding(cfg)
        x = initial_noise(cfg, seed, len(cams))
        for t, t_next in sched.ddim_timesteps(steps):
            ec = predict_eps(params, cfg, Tensor(x), cond, emb, t, cams).data
            eu = ec if cfg_scale == 1 else predict_eps(params, cfg, Tensor(x), None, null, t, cams).data
            x = sched.ddim_step(x, cfg_combine(ec, eu, cfg_scale), t, t_next)
    return to_images(x)


def initial_noise(cfg: DenoiserConfig, seed: int, frames: int | None = None) -> np.ndarray:
    rng = np.random.default_rng(seed)
    f = cfg.views if frames is None else frames
    return rng.standard_normal((f, cfg.resolution, cfg.resolution, 3), dtype=np.float32)
