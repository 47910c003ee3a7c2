"""Pretraining of the base multiview denoiser."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import denoiser as dn
from . import tensor as tn
from .dataset import Dataset
from .optim import Adam

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 2e-4
    steps: int = 10_000
    batch: int = 1                 # orbit sets per step
    seed: int = 0
    cond_dropout: float = 0.1      # drop concat image and embedding together
    concat_dropout: float = 0.1    # drop only the concat image
    checkpoint_interval: int = 1000

    def __post_init__(self):
        if self.lr <= 0 or self.steps <= 0 or self.batch <= 0:
            raise ValueError("lr, steps and batch must be positive")
        if not (0 <= self.cond_dropout < 1 and 0 <= self.concat_dropout < 1
                and self.cond_dropout + self.concat_dropout < 1):
            raise ValueError("dropout probabilities must lie in [0, 1) and sum below 1")


def diffusion_loss(params, arch: dn.DenoiserConfig, sched: dn.NoiseSchedule, x0: np.ndarray, t: int,
                   eps: np.ndarray, cond_img: np.ndarray | None, emb: tn.Tensor, hook=None) -> tn.Tensor:
    """Epsilon-matching loss for one orbit set (``x0``/``cond_img`` in [-1, 1])."""
    x_t = sched.forward_noise(x0, t, eps)
    pred = dn.predict_eps(params, arch, tn.Tensor(x_t, dtype=x_t.dtype), cond_img, emb, t, hook=hook)
    return tn.mean_square_error(pred, tn.Tensor(eps, dtype=eps.dtype))


def train_base(dataset: Dataset, config: TrainConfig, arch: dn.DenoiserConfig | None = None,
               out: str | Path | None = None, init: dict | None = None,
               on_step: Callable[[int, float], None] | None = None):
    """Train from scratch (or from ``init``); returns (params, per-step losses)."""
    orbits = dataset.orbit_ids("train")
    if not orbits:
        raise TrainingError("manifest contains no training orbit sets")
    arch = arch or dn.DenoiserConfig(resolution=dataset.resolution, views=dataset.views)
    if arch.resolution != dataset.resolution or arch.views != dataset.views:
        raise TrainingError("architecture resolution/views disagree with the dataset")
    sched = dn.NoiseSchedule.from_config(arch)
    rng = np.random.default_rng(config.seed)
    params = init if init is not None else dn.init_params(arch, seed=config.seed)
    for p in params.values():
        p.requires_grad = True
    names = sorted(params)
    opt = Adam([params[n] for n in names], lr=config.lr)

    data = {o: tuple(dn.to_signal(a) for a in dataset.orbit(o)) for o in orbits}
    order: list[str] = []
    losses: list[float] = []
    for step in range(config.steps):
        opt.zero_grad()
        total = 0.0
        for _ in range(config.batch):
            if not order:
                order = [orbits[i] for i in rng.permutation(len(orbits))]
            views, obj = data[order.pop()]
            t = int(rng.integers(1, sched.T + 1))
            eps = rng.standard_normal(views.shape, dtype=np.float32)
            u = rng.random()
            if u < config.cond_dropout:
                cond, use_emb = None, False
            elif u < config.cond_dropout + config.concat_dropout:
                cond, use_emb = None, True
            else:
                cond, use_emb = obj, True
            if use_emb:
                emb = dn.encode_condition(params, arch, obj)
            else:
                emb = dn.null_embedding(arch)
            loss = diffusion_loss(params, arch, sched, views, t, eps, cond, emb)
            if config.batch > 1:
                loss = tn.scale(loss, 1.0 / config.batch)
            tn.backward(loss)
            total += loss.item()
        if not math.isfinite(total):
            raise TrainingError(f"non-finite loss at step {step}")
        opt.step()
        losses.append(total)
        if on_step is not None:
            on_step(step, total)
        if step % 100 == 0:
            log.info("step %d loss %.5f", step, total)
        if out is not None and config.checkpoint_interval and (step + 1) % config.checkpoint_interval == 0:
            dn.save_params(out, params, arch, extra={"train": asdict(config), "step": step + 1})
    for p in params.values():
        p.requires_grad = False
        p.grad = None
    if out is not None:
        dn.save_params(out, params, arch, extra={"train": asdict(config), "step": config.steps})
    return params, losses
