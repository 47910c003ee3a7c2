"""Cached construction of the default dataset and base model.

Both are pure functions of their configs, so artifacts are stored under a
directory named by a digest of those configs and reused when present.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, replace
from pathlib import Path

from . import denoiser as dn
from .dataset import Dataset, DatasetConfig, default_materials, default_shapes, make_dataset
from .train_base import TrainConfig, train_base

log = logging.getLogger(__name__)

DEFAULT_CACHE = Path(os.environ.get("TRIMIX_CACHE", Path(__file__).resolve().parents[2] / "runs" / "cache"))


def config_digest(*objs) -> str:
    blob = json.dumps([asdict(o) if hasattr(o, "__dataclass_fields__") else o for o in objs],
                      sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def default_dataset(cache: Path = DEFAULT_CACHE, config: DatasetConfig | None = None) -> Dataset:
    config = config or DatasetConfig()
    shapes, mats = default_shapes(), default_materials()
    # worker count does not change the bytes written
    root = Path(cache) / f"data-{config_digest(replace(config, workers=1), shapes, mats)}"
    if not (root / "manifest.json").exists():
        log.info("rendering dataset into %s", root)
        make_dataset(shapes, mats, config, root.with_suffix(".partial"))
        os.replace(root.with_suffix(".partial"), root)
    return Dataset(root)


def default_base(cache: Path = DEFAULT_CACHE, train: TrainConfig | None = None,
                 arch: dn.DenoiserConfig | None = None, dataset: Dataset | None = None, on_step=None):
    """(dataset, params, arch, checkpoint path), training the base if needed."""
    ds = dataset or default_dataset(cache)
    train = train or TrainConfig()
    arch = arch or dn.DenoiserConfig(resolution=ds.resolution, views=ds.views)
    key = config_digest(train, arch, dn.param_names(arch), ds.manifest["entries"])
    path = Path(cache) / f"base-{key}.tmx"
    if not path.exists():
        log.info("training base model into %s", path)
        losses_path = path.with_suffix(".loss.csv")
        with open(losses_path, "w") as fh:
            def step(i, loss):
                fh.write(f"{i},{loss!r}\n")
                if on_step is not None:
                    on_step(i, loss)
            train_base(ds, train, arch, out=path.with_suffix(".partial.tmx"), on_step=step)
        os.replace(path.with_suffix(".partial.tmx"), path)
    params, arch = dn.load_params(path)
    return ds, params, arch, path
