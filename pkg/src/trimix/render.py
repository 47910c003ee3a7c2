"""Sphere-traced software renderer for small procedural scenes.

Scenes are one analytic SDF shape at the origin, viewed by an orbiting
pinhole camera. Lighting is a key light plus ambient, both expressed in the
camera frame so that a rotationally symmetric object looks identical from
every azimuth. Background pixels are the pure key colour ``(1, 0, 1)`` and
nothing in the foreground is allowed to quantise to it, so masks can always
be recovered exactly from an 8-bit image.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

KEY_COLOR = np.array([1.0, 0.0, 1.0])
MAX_STEPS = 128
HIT_EPS = 1e-3
SHAPE_KINDS = ("sphere", "cube", "torus", "capsule")


class RenderError(ValueError):
    pass


def _clamp01(v):
    return tuple(float(min(1.0, max(0.0, c))) for c in v)


@dataclass(frozen=True)
class MaterialSpec:
    albedo: tuple[float, float, float] = (0.8, 0.8, 0.8)
    checker_scale: float = 0.0
    checker_albedo2: tuple[float, float, float] = (0.2, 0.2, 0.2)
    specular_strength: float = 0.0
    shininess: float = 16.0
    metallic: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "albedo", _clamp01(self.albedo))
        object.__setattr__(self, "checker_albedo2", _clamp01(self.checker_albedo2))
        object.__setattr__(self, "specular_strength", min(1.0, max(0.0, float(self.specular_strength))))
        object.__setattr__(self, "metallic", min(1.0, max(0.0, float(self.metallic))))
        object.__setattr__(self, "checker_scale", max(0.0, float(self.checker_scale)))
        object.__setattr__(self, "shininess", max(1.0, float(self.shininess)))


@dataclass(frozen=True)
class ShapeSpec:
    """``size`` meaning per kind: sphere (radius,), cube (half extents x, y, z),
    torus (major, minor), capsule (half length, radius). Orientation is
    (yaw, pitch, roll) in degrees about y, x, z."""

    kind: str = "sphere"
    size: tuple[float, ...] = (0.8,)
    orientation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise RenderError(f"unknown shape kind {self.kind!r}")
        expected = {"sphere": 1, "cube": 3, "torus": 2, "capsule": 2}[self.kind]
        size = tuple(float(s) for s in self.size)
        if len(size) != expected or min(size) <= 0:
            raise RenderError(f"{self.kind} needs {expected} positive size parameters, got {self.size}")
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "orientation", tuple(float(a) for a in self.orientation))

    def extent(self) -> float:
        s = self.size
        if self.kind == "sphere":
            return s[0]
        if self.kind == "cube":
            return math.sqrt(sum(c * c for c in s))
        if self.kind == "torus":
            return s[0] + s[1]
        return s[0] + s[1]

    def rotation(self) -> np.ndarray:
        yaw, pitch, roll = (math.radians(a) for a in self.orientation)
        cy, sy = math.cos(yaw), math.sin(yaw)
        cx, sx = math.cos(pitch), math.sin(pitch)
        cz, sz = math.cos(roll), math.sin(roll)
        ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
        rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
        rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
        return ry @ rx @ rz

    def sdf_object(self, q: np.ndarray) -> np.ndarray:
        """Signed distance for object-space points ``q`` of shape (..., 3)."""
        s = self.size
        if self.kind == "sphere":
            return np.linalg.norm(q, axis=-1) - s[0]
        if self.kind == "cube":
            d = np.abs(q) - np.asarray(s)
            outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
            return outside + np.minimum(d.max(axis=-1), 0.0)
        if self.kind == "torus":
            ring = np.hypot(q[..., 0], q[..., 2]) - s[0]
            return np.hypot(ring, q[..., 1]) - s[1]
        y = np.clip(q[..., 1], -s[0], s[0])
        d = q.copy()
        d[..., 1] = q[..., 1] - y
        return np.linalg.norm(d, axis=-1) - s[1]

    def to_object(self, p: np.ndarray) -> np.ndarray:
        return p @ self.rotation()

    def sdf(self, p: np.ndarray) -> np.ndarray:
        return self.sdf_object(self.to_object(p))


@dataclass(frozen=True)
class CameraSpec:
    azimuth: float = 0.0
    elevation: float = 20.0
    radius: float = 3.0
    fov: float = 40.0

    def __post_init__(self):
        if not -89.0 <= self.elevation <= 89.0:
            raise RenderError(f"elevation {self.elevation} outside [-89, 89]")
        if self.radius <= 0:
            raise RenderError("camera radius must be positive")

    def frame(self):
        """Camera position and (right, up, forward) unit vectors."""
        az, el = math.radians(self.azimuth), math.radians(self.elevation)
        pos = self.radius * np.array([math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)])
        fwd = -pos / np.linalg.norm(pos)
        right = np.cross(fwd, [0.0, 1.0, 0.0])
        right /= np.linalg.norm(right)
        up = np.cross(right, fwd)
        return pos, right, up, fwd


@dataclass(frozen=True)
class LightSpec:
    """Key light direction in the camera frame: +x right, +y up, +z towards the viewer."""

    direction: tuple[float, float, float] = (-0.45, 0.55, 0.7)
    intensity: float = 0.8
    ambient: float = 0.25

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        n = np.linalg.norm(d)
        if n == 0:
            raise RenderError("light direction must be non-zero")
        object.__setattr__(self, "direction", tuple(float(c) for c in d / n))


@dataclass
class View:
    image: np.ndarray          # (H, W, 3) float in [0, 1]
    mask: np.ndarray           # (H, W) bool, True on the object
    spec_term: np.ndarray = field(repr=False, default=None)  # max(0, r.v) per pixel, 0 off-object


def foreground_mask(image: np.ndarray, tol: float = 0.0) -> np.ndarray:
    """Pixels farther than ``tol`` (max-abs per channel) from the key colour."""
    return np.abs(np.asarray(image, dtype=np.float64) - KEY_COLOR).max(axis=-1) > tol


def _normals(shape: ShapeSpec, p: np.ndarray, h: float = 1e-4) -> np.ndarray:
    offs = np.eye(3) * h
    g = np.stack([shape.sdf(p + o) - shape.sdf(p - o) for o in offs], axis=-1)
    return g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)


def render_view(shape: ShapeSpec, material: MaterialSpec, camera: CameraSpec,
                light: LightSpec, resolution: int) -> View:
    pos, right, up, fwd = camera.frame()
    if shape.sdf(pos[None])[0] <= 0 or camera.radius <= shape.extent():
        raise RenderError("camera is inside (or touching) the shape")
    res = int(resolution)
    half = math.tan(math.radians(camera.fov) / 2)
    coords = (np.arange(res) + 0.5) / res * 2 - 1
    u = coords[None, :] * half
    v = -coords[:, None] * half
    dirs = fwd + u[..., None] * right + v[..., None] * up
    dirs = dirs.reshape(-1, 3)
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)

    n_rays = dirs.shape[0]
    t = np.zeros(n_rays)
    hit = np.zeros(n_rays, dtype=bool)
    active = np.ones(n_rays, dtype=bool)
    t_max = camera.radius + shape.extent() + 1.0
    for _ in range(MAX_STEPS):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        d = shape.sdf(pos + dirs[idx] * t[idx, None])
        close = d < HIT_EPS
        hit[idx[close]] = True
        t[idx[~close]] += d[~close]
        escaped = t[idx] > t_max
        active[idx[close | escaped]] = False

    img = np.tile(KEY_COLOR, (n_rays, 1))
    spec_map = np.zeros(n_rays)
    hi = np.nonzero(hit)[0]
    if hi.size:
        p = pos + dirs[hi] * t[hi, None]
        n = _normals(shape, p)
        l_dir = np.asarray(light.direction)
        l = l_dir[0] * right + l_dir[1] * up - l_dir[2] * fwd
        view = -dirs[hi]
        ndl = n @ l
        refl = 2 * ndl[:, None] * n - l
        rdv = np.maximum(0.0, np.einsum("ij,ij->i", refl, view))

        q = shape.to_object(p)
        albedo = np.tile(np.asarray(material.albedo), (hi.size, 1))
        if material.checker_scale > 0:
            parity = np.floor(material.checker_scale * q).sum(axis=-1).astype(np.int64) % 2
            albedo[parity == 1] = material.checker_albedo2
        white = np.ones(3)
        spec_col = white * (1 - material.metallic) + albedo * material.metallic
        col = (light.ambient * albedo
               + light.intensity * np.maximum(0.0, ndl)[:, None] * albedo
               + material.specular_strength * (rdv ** material.shininess)[:, None] * spec_col)
        col = np.clip(col, 0.0, 1.0)
        q8 = np.round(col * 255)
        clash = (q8[:, 0] == 255) & (q8[:, 1] == 0) & (q8[:, 2] == 255)
        col[clash, 1] = 1.0 / 255
        img[hi] = col
        spec_map[hi] = rdv

    return View(image=img.reshape(res, res, 3), mask=hit.reshape(res, res),
                spec_term=spec_map.reshape(res, res))


def orbit_cameras(view_count: int, elevation: float = 20.0, radius: float = 3.0,
                  fov: float = 40.0) -> list[CameraSpec]:
    if view_count < 1:
        raise RenderError("need at least one view")
    return [CameraSpec(azimuth=k * 360.0 / view_count, elevation=elevation, radius=radius, fov=fov)
            for k in range(view_count)]


def render_orbit(shape: ShapeSpec, material: MaterialSpec, light: LightSpec, view_count: int,
                 elevation: float, resolution: int, radius: float = 3.0, fov: float = 40.0) -> list[View]:
    return [render_view(shape, material, cam, light, resolution)
            for cam in orbit_cameras(view_count, elevation, radius, fov)]


CANONICAL_SPHERE = ShapeSpec("sphere", (0.8,))
CANONICAL_CAMERA = CameraSpec(azimuth=0.0, elevation=20.0, radius=3.0, fov=40.0)


def render_material_sphere(material: MaterialSpec, light: LightSpec, resolution: int,
                           expected_resolution: int | None = None) -> np.ndarray:
    if expected_resolution is not None and resolution != expected_resolution:
        raise RenderError(f"resolution {resolution} does not match dataset resolution {expected_resolution}")
    return render_view(CANONICAL_SPHERE, material, CANONICAL_CAMERA, light, resolution).image


def spec_dict(spec) -> dict:
    return asdict(spec)
