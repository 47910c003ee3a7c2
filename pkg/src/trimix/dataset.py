"""Synthetic multiview dataset: orbit renders, material spheres, triplets.

On disk a dataset is a directory of 8-bit PNGs plus ``manifest.json``::

    {"version": 1, "resolution": 32, "F": 4,
     "entries": [{"role": "object" | "reference" | "target_view",
                  "file": "...png", "camera": {...}, "material": "<id>",
                  "shape": "<id>", "split": "train" | "held_out",
                  "orbit": "<shape>/<material>", "view": k}, ...],
     "shapes": {id: ShapeSpec}, "materials": {id: MaterialSpec},
     "light": LightSpec, "triplets": [{"id", "shape", "source", "target", "split"}, ...]}

Reference spheres are rendered per material under the shape id
``refsphere`` and are always in the train split.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .render import (CANONICAL_SPHERE, LightSpec, MaterialSpec, ShapeSpec, orbit_cameras,
                     render_material_sphere, render_view)

MANIFEST_VERSION = 1
REF_SHAPE = "refsphere"


class DatasetError(RuntimeError):
    pass


def default_shapes() -> dict[str, ShapeSpec]:
    return {
        "cube": ShapeSpec("cube", (0.55, 0.55, 0.55), (30, 20, 0)),
        "torus": ShapeSpec("torus", (0.6, 0.25), (0, 65, 0)),
        "capsule": ShapeSpec("capsule", (0.45, 0.4), (0, 0, 40)),
        "slab": ShapeSpec("cube", (0.8, 0.35, 0.35), (45, 0, 20)),
    }


def default_materials() -> dict[str, MaterialSpec]:
    return {
        "red": MaterialSpec((0.85, 0.15, 0.1)),
        "green": MaterialSpec((0.15, 0.7, 0.2)),
        "blue_gloss": MaterialSpec((0.15, 0.25, 0.85), specular_strength=0.5, shininess=32),
        "yellow": MaterialSpec((0.9, 0.8, 0.15)),
        "checker_bw": MaterialSpec((0.9, 0.9, 0.9), 3.0, (0.2, 0.2, 0.2)),
        "checker_ob": MaterialSpec((0.95, 0.5, 0.1), 3.0, (0.1, 0.3, 0.8)),
        "gold": MaterialSpec((0.85, 0.65, 0.2), specular_strength=0.8, shininess=20, metallic=1.0),
        "teal": MaterialSpec((0.1, 0.65, 0.65), specular_strength=0.3, shininess=16),
    }


DEFAULT_HELD_OUT = (("cube", "gold"), ("torus", "red"), ("capsule", "checker_bw"), ("slab", "teal"))


@dataclass
class DatasetConfig:
    resolution: int = 32
    views: int = 4
    elevation: float = 20.0
    radius: float = 3.0
    fov: float = 40.0
    light: LightSpec = field(default_factory=LightSpec)
    held_out: tuple[tuple[str, str], ...] = DEFAULT_HELD_OUT
    triplets: bool = True
    workers: int = 1


@dataclass
class Triplet:
    object_image: np.ndarray       # (H, W, 3)
    reference_image: np.ndarray    # (H, W, 3)
    target_views: np.ndarray       # (F, H, W, 3)
    metadata: dict


def save_png(path: str | os.PathLike, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    try:
        Image.fromarray(arr, mode="RGB").save(path, format="PNG", optimize=False)
    except OSError as e:
        raise DatasetError(f"failed to write {path}: {e}") from e


def load_png(path: str | os.PathLike) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except OSError as e:
        raise DatasetError(f"failed to read {path}: {e}") from e
    return arr / 255.0


def quantize(image: np.ndarray) -> np.ndarray:
    """Round-trip through 8 bits, exactly like save_png + load_png."""
    return (np.clip(np.round(np.asarray(image, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
            .astype(np.float32) / 255.0)


def _render_job(job):
    kind, shape, material, camera, light, res, path = job
    if kind == "sphere":
        img = render_material_sphere(material, light, res)
    else:
        img = render_view(shape, material, camera, light, res).image
    save_png(path, img)
    return path


def make_dataset(shapes: dict[str, ShapeSpec], materials: dict[str, MaterialSpec],
                 config: DatasetConfig, out_dir: str | os.PathLike) -> dict:
    if not shapes or not materials:
        raise DatasetError("make_dataset needs at least one shape and one material")
    if REF_SHAPE in shapes:
        raise DatasetError(f"shape id {REF_SHAPE!r} is reserved")
    out = Path(out_dir)
    held = {tuple(p) for p in config.held_out}
    cams = orbit_cameras(config.views, config.elevation, config.radius, config.fov)
    entries, jobs = [], []

    def add_orbit(shape_id, shape, mat_id, split):
        orbit = f"{shape_id}/{mat_id}"
        for k, cam in enumerate(cams):
            rel = f"views/{shape_id}/{mat_id}/v{k}.png"
            entries.append(dict(role="target_view", file=rel, camera=asdict(cam), material=mat_id,
                                shape=shape_id, split=split, orbit=orbit, view=k))
            jobs.append(("view", shape, materials[mat_id], cam, config.light, config.resolution, out / rel))
        # the conditioning image is the front view
        rel = f"objects/{shape_id}/{mat_id}.png"
        entries.append(dict(role="object", file=rel, camera=asdict(cams[0]), material=mat_id,
                            shape=shape_id, split=split, orbit=orbit, view=0))
        jobs.append(("view", shape, materials[mat_id], cams[0], config.light, config.resolution, out / rel))

    for sid in sorted(shapes):
        for mid in sorted(materials):
            add_orbit(sid, shapes[sid], mid, "held_out" if (sid, mid) in held else "train")

    triplets = []
    if config.triplets:
        for mid in sorted(materials):
            add_orbit(REF_SHAPE, CANONICAL_SPHERE, mid, "train")
            rel = f"references/{mid}.png"
            entries.append(dict(role="reference", file=rel, camera=asdict(cams[0]), material=mid,
                                shape=REF_SHAPE, split="train", orbit=f"{REF_SHAPE}/{mid}", view=0))
            jobs.append(("sphere", None, materials[mid], None, config.light, config.resolution, out / rel))
        for sid in sorted(shapes):
            for src in sorted(materials):
                if (sid, src) in held:
                    continue
                for dst in sorted(materials):
                    if dst == src:
                        continue
                    split = "held_out" if (sid, dst) in held else "train"
                    triplets.append(dict(id=f"{sid}:{src}->{dst}", shape=sid, source=src,
                                         target=dst, split=split))

    out.mkdir(parents=True, exist_ok=True)
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            list(pool.map(_render_job, jobs))
    else:
        for job in jobs:
            _render_job(job)

    manifest = dict(
        version=MANIFEST_VERSION, resolution=config.resolution, F=config.views,
        entries=entries,
        shapes={k: asdict(v) for k, v in sorted(shapes.items())},
        materials={k: asdict(v) for k, v in sorted(materials.items())},
        light=asdict(config.light),
        triplets=triplets,
    )
    try:
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    except OSError as e:
        raise DatasetError(f"failed to write {out / 'manifest.json'}: {e}") from e
    return manifest


class Dataset:
    """Read-side view of a rendered dataset directory (images are cached)."""

    def __init__(self, root: str | os.PathLike):
        root = Path(root)
        path = root / "manifest.json" if root.is_dir() else root
        self.root = path.parent
        try:
            self.manifest = json.loads(path.read_text())
        except OSError as e:
            raise DatasetError(f"cannot read manifest {path}: {e}") from e
        self.resolution = self.manifest["resolution"]
        self.views = self.manifest["F"]
        self._cache: dict[str, np.ndarray] = {}
        self._orbits: dict[str, dict] = {}
        self._refs: dict[str, str] = {}
        for e in self.manifest["entries"]:
            o = self._orbits.setdefault(e["orbit"], dict(views={}, object=None, split=e["split"],
                                                          shape=e["shape"], material=e["material"]))
            if e["role"] == "target_view":
                o["views"][e["view"]] = e["file"]
            elif e["role"] == "object":
                o["object"] = e["file"]
            elif e["role"] == "reference":
                self._refs[e["material"]] = e["file"]
        self.triplets = {t["id"]: t for t in self.manifest.get("triplets", [])}

    def image(self, rel: str) -> np.ndarray:
        if rel not in self._cache:
            self._cache[rel] = load_png(self.root / rel)
        return self._cache[rel]

    def orbit_ids(self, split: str | None = "train") -> list[str]:
        return sorted(k for k, o in self._orbits.items() if split is None or o["split"] == split)

    def orbit(self, orbit_id: str) -> tuple[np.ndarray, np.ndarray]:
        """(views (F, H, W, 3), front object image (H, W, 3))."""
        try:
            o = self._orbits[orbit_id]
        except KeyError:
            raise DatasetError(f"unknown orbit set {orbit_id!r}") from None
        views = np.stack([self.image(o["views"][k]) for k in range(self.views)])
        return views, self.image(o["object"])

    def reference(self, material_id: str) -> np.ndarray:
        if material_id not in self._refs:
            raise DatasetError(f"no reference sphere for material {material_id!r}")
        return self.image(self._refs[material_id])

    def triplet_ids(self, split: str | None = None) -> list[str]:
        return sorted(k for k, t in self.triplets.items() if split is None or t["split"] == split)

    def triplet(self, triplet_id: str) -> Triplet:
        try:
            t = self.triplets[triplet_id]
        except KeyError:
            raise DatasetError(f"unknown triplet {triplet_id!r}") from None
        return self.compose_triplet(t["shape"], t["source"], t["target"], dict(t))

    def compose_triplet(self, shape_id: str, source: str, target: str, metadata: dict | None = None) -> Triplet:
        """Any (shape in ``source``, sphere in ``target``, shape orbit in ``target``) triple."""
        _, obj = self.orbit(f"{shape_id}/{source}")
        views, _ = self.orbit(f"{shape_id}/{target}")
        meta = metadata or dict(id=f"{shape_id}:{source}->{target}", shape=shape_id, source=source,
                                target=target)
        return Triplet(object_image=obj, reference_image=self.reference(target), target_views=views,
                       metadata=meta)

    def side_orbits(self, triplet_id: str) -> tuple[np.ndarray, np.ndarray]:
        """Clean orbit renders used to teacher-force the object and reference streams."""
        t = self.triplets[triplet_id]
        obj_views, _ = self.orbit(f"{t['shape']}/{t['source']}")
        ref_views, _ = self.orbit(f"{REF_SHAPE}/{t['target']}")
        return obj_views, ref_views
