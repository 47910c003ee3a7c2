"""Few-shot training of the mixing logits with the base model frozen.

Each step teacher-forces all three streams from one triplet at a shared
noise level and noise draw: the object stream sees the noised orbit of the
object in its own material, the reference stream the noised orbit of the
reference sphere, and the main stream the noised ground-truth target views.
The loss is the ordinary epsilon-matching objective on the main stream's
prediction; gradients reach only the mixing logits.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import denoiser as dn
from . import tensor as tn
from .dataset import Dataset
from .optim import Adam
from .tensor import Tensor
from .tristream import KVCapture, MainStreamMixer, MixWeights, argmax_table, check_registry

log = logging.getLogger(__name__)


class FrozenWeightError(AssertionError):
    pass


@dataclass
class AdaptConfig:
    lr: float = 1e-2
    steps: int = 300
    seed: int = 0
    per_frame: bool = True
    triplets: list[str] = field(default_factory=list)
    t_range: tuple[float, float] = (0.1, 0.9)
    streams: tuple[bool, bool, bool] = (True, True, True)
    unconditional_main: bool = True

    def __post_init__(self):
        if self.lr <= 0 or self.steps <= 0:
            raise ValueError("lr and steps must be positive")
        if not 0 <= self.t_range[0] <= self.t_range[1] <= 1:
            raise ValueError("t_range must be a sub-interval of [0, 1]")


@dataclass
class TeacherBatch:
    """One teacher-forced sample (all arrays in [-1, 1])."""

    object_views: np.ndarray
    reference_views: np.ndarray
    target_views: np.ndarray
    object_image: np.ndarray
    reference_image: np.ndarray
    t: int
    eps: np.ndarray

    def astype(self, dtype) -> "TeacherBatch":
        conv = lambda a: np.asarray(a, dtype=dtype)
        return TeacherBatch(conv(self.object_views), conv(self.reference_views), conv(self.target_views),
                            conv(self.object_image), conv(self.reference_image), self.t, conv(self.eps))


def params_digest(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(params[name].data.tobytes())
    return h.hexdigest()


def load_batch(dataset: Dataset, triplet_id: str, t: int, eps: np.ndarray | None,
               rng: np.random.Generator | None = None) -> TeacherBatch:
    trip = dataset.triplet(triplet_id)
    obj_views, ref_views = dataset.side_orbits(triplet_id)
    if eps is None:
        eps = rng.standard_normal(trip.target_views.shape, dtype=np.float32)
    return TeacherBatch(dn.to_signal(obj_views), dn.to_signal(ref_views), dn.to_signal(trip.target_views),
                        dn.to_signal(trip.object_image), dn.to_signal(trip.reference_image), int(t), eps)


def mix_loss(params, arch: dn.DenoiserConfig, mw: MixWeights, logits: Tensor, batch: TeacherBatch,
             unconditional_main: bool = True) -> Tensor:
    """Teacher-forced main-stream diffusion loss as a function of ``logits``."""
    sched = dn.NoiseSchedule.from_config(arch)
    t, eps = batch.t, batch.eps
    cams = tuple(range(arch.views))
    with tn.no_grad():
        e_o = dn.encode_condition(params, arch, batch.object_image)
        e_r = dn.encode_condition(params, arch, batch.reference_image)
        cap_o, cap_r = KVCapture(), KVCapture()
        if mw.streams[0]:
            x_o = Tensor(sched.forward_noise(batch.object_views, t, eps), dtype=eps.dtype)
            dn.predict_eps(params, arch, x_o, batch.object_image, e_o, t, cams, hook=cap_o)
        if mw.streams[1]:
            x_r = Tensor(sched.forward_noise(batch.reference_views, t, eps), dtype=eps.dtype)
            dn.predict_eps(params, arch, x_r, batch.reference_image, e_r, t, cams, hook=cap_r)
        if unconditional_main:
            cond, emb = None, tn.scale(tn.add(e_o, e_r), 0.5)
        else:
            cond, emb = batch.object_image, e_o
    mixer = MainStreamMixer(mw, logits, cams, cap_o if mw.streams[0] else None,
                            cap_r if mw.streams[1] else None)
    x_m = Tensor(sched.forward_noise(batch.target_views, t, eps), dtype=eps.dtype)
    pred = dn.predict_eps(params, arch, x_m, cond, emb, t, cams, hook=mixer)
    return tn.mean_square_error(pred, Tensor(eps, dtype=eps.dtype))


def train_mix(dataset: Dataset, params, arch: dn.DenoiserConfig, config: AdaptConfig,
              on_step=None) -> tuple[MixWeights, list[float]]:
    if not config.triplets:
        raise ValueError("train_mix needs at least one triplet")
    for tid in config.triplets:
        if tid not in dataset.triplets:
            raise ValueError(f"unknown triplet {tid!r}")
    if dataset.resolution != arch.resolution or dataset.views != arch.views:
        raise ValueError("triplet resolution/views do not match the base model")
    for p in params.values():
        p.requires_grad = False
    before = params_digest(params)

    mw = MixWeights.zeros(len(dn.ATTENTION_LAYERS), arch.views, config.per_frame, config.streams)
    check_registry(mw, arch)
    expected = len(dn.ATTENTION_LAYERS) * (arch.views if config.per_frame else 1) * 3
    if mw.trainable_count != expected:
        raise AssertionError(f"trainable count {mw.trainable_count} != {expected}")
    logits = tn.parameter(mw.logits.copy())
    opt = Adam([logits], lr=config.lr)

    rng = np.random.default_rng(config.seed)
    lo = max(1, int(round(config.t_range[0] * arch.T)))
    hi = max(lo, int(round(config.t_range[1] * arch.T)))
    losses = []
    for step in range(config.steps):
        tid = config.triplets[int(rng.integers(len(config.triplets)))]
        t = int(rng.integers(lo, hi + 1))
        batch = load_batch(dataset, tid, t, None, rng)
        opt.zero_grad()
        loss = mix_loss(params, arch, mw, logits, batch, config.unconditional_main)
        value = loss.item()
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite mix loss at step {step}")
        tn.backward(loss)
        opt.step()
        mw.logits = logits.data.copy()
        losses.append(value)
        if on_step is not None:
            on_step(step, value)
        if step % 50 == 0:
            log.info("mix step %d loss %.5f", step, value)

    if params_digest(params) != before:
        raise FrozenWeightError("base weights changed during mix training")
    return MixWeights(logits.data.copy(), config.per_frame, config.streams, arch.views), losses


def weight_report(mw: MixWeights) -> dict:
    """Alpha table plus per-cell and per-layer entropy (nats)."""
    table = mw.alpha_table()
    with np.errstate(divide="ignore", invalid="ignore"):
        cell = -np.where(table > 0, table * np.log(table), 0.0).sum(axis=-1)
    return {
        "alphas": table,
        "cell_entropy": cell,
        "layer_entropy": cell.mean(axis=1),
        "argmax": argmax_table(table),
        "max_alpha": table.max(axis=-1),
    }
