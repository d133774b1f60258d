"""Procedural synthetic RGB-D scenes and depth normalization.

Scenes are small arrangements of analytic primitives (ground plane,
axis-aligned boxes, spheres) rendered through a pinhole camera with a
z-buffer: every pixel's depth is the minimum hit distance over primitives,
measured along the optical axis (rays carry a unit z component). Shading is
flat Lambertian from one fixed directional light, so the image carries the
scene layout without any texture machinery. Everything is a pure function of
(seed, config), which is what makes file-level and training-level
reproducibility checks possible.

Depth maps are normalized per sample to [-1, 1] by an affine map anchored at
two percentiles of the valid pixels, and the realized (lo, hi) pair inverts
the map exactly on the unclamped interior.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, DegenerateNormalizationError, ShapeError

FAMILIES = ("empty", "indoor", "roadway")

# One light for every scene, pointing from surfaces toward the source.
_LIGHT = np.array([-0.3, 0.8, -0.5])
_LIGHT = _LIGHT / np.linalg.norm(_LIGHT)
_AMBIENT = 0.25
_SKY_COLOR = np.array([0.65, 0.75, 0.9], dtype=np.float32)

GENERATOR_VERSION = 1


@dataclass
class SceneConfig:
    height: int = 48
    width: int = 64
    family: str = "indoor"
    far: float = 20.0

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ConfigError(f"image size {self.height}x{self.width} too small")
        if self.height % 8 or self.width % 8:
            raise ConfigError(
                f"image size {self.height}x{self.width} not divisible by 8"
            )
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown scene family '{self.family}'")
        if not self.far > 1.0:
            raise ConfigError(f"far plane {self.far} must exceed 1")


@dataclass
class NormalizationSpec:
    p_lo: float = 2.0
    p_hi: float = 98.0

    def __post_init__(self):
        if not 0.0 <= self.p_lo < self.p_hi <= 100.0:
            raise ConfigError(
                f"percentiles ({self.p_lo}, {self.p_hi}) violate 0 <= lo < hi <= 100"
            )


@dataclass
class DepthSample:
    rgb: np.ndarray        # (3, H, W) float32 in [0, 1]
    depth: np.ndarray      # (H, W) float32, meters; far-plane value where invalid
    valid_mask: np.ndarray # (H, W) bool
    seed: int


@dataclass
class Plane:
    y: float
    albedo: np.ndarray


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    albedo: np.ndarray


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    albedo: np.ndarray


@dataclass
class Scene:
    primitives: list
    camera_height: float
    seed: int


def _rays(h: int, w: int):
    """Per-pixel ray directions (dx, dy, dz=1); depth below is the ray scale t."""
    focal = 0.9 * w
    cx = (w - 1) / 2.0
    cy = (h - 1) / 2.0
    j = np.arange(w, dtype=np.float64)
    i = np.arange(h, dtype=np.float64)
    dx = np.broadcast_to((j - cx) / focal, (h, w))
    dy = np.broadcast_to(((cy - i) / focal)[:, None], (h, w))
    return np.ascontiguousarray(dx), np.ascontiguousarray(dy)


def _random_albedo(rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0.25, 0.95, size=3)


def build_scene(seed: int, config: SceneConfig) -> Scene:
    """Deterministic primitive layout for one seed."""
    rng = np.random.default_rng((GENERATOR_VERSION, seed))
    cam_h = float(rng.uniform(1.2, 1.8))
    floor = -cam_h
    prims: list = [Plane(floor, _random_albedo(rng) * np.array([0.8, 1.0, 0.8]))]
    if config.family == "empty":
        return Scene(prims, cam_h, seed)
    n = int(rng.integers(3, 9))
    for _ in range(n):
        if config.family == "indoor":
            z = float(rng.uniform(2.0, 9.0))
            if rng.random() < 0.5:
                r = float(rng.uniform(0.25, 0.9))
                x = float(rng.uniform(-0.35, 0.35)) * z
                prims.append(Sphere(np.array([x, floor + r, z]), r,
                                    _random_albedo(rng)))
            else:
                sx = float(rng.uniform(0.4, 1.6))
                sy = float(rng.uniform(0.4, 2.2))
                sz = float(rng.uniform(0.4, 1.6))
                x = float(rng.uniform(-0.35, 0.35)) * z
                lo = np.array([x - sx / 2, floor, z - sz / 2])
                prims.append(Box(lo, lo + np.array([sx, sy, sz]),
                                 _random_albedo(rng)))
        else:  # roadway: distant boxes flanking a clear middle
            z = float(rng.uniform(5.0, 17.0))
            sx = float(rng.uniform(0.8, 2.5))
            sy = float(rng.uniform(1.0, 4.0))
            sz = float(rng.uniform(0.8, 2.5))
            side = 1.0 if rng.random() < 0.5 else -1.0
            x = side * float(rng.uniform(0.12, 0.45)) * z
            lo = np.array([x - sx / 2, floor, z - sz / 2])
            prims.append(Box(lo, lo + np.array([sx, sy, sz]),
                             _random_albedo(rng)))
    return Scene(prims, cam_h, seed)


def primitive_depth(prim, h: int, w: int):
    """Hit distance (ray z-scale) per pixel, +inf where the primitive is missed.

    Also returns the surface normals at the hits, for shading.
    """
    dx, dy = _rays(h, w)
    inf = np.full((h, w), np.inf)
    normals = np.zeros((3, h, w))
    if isinstance(prim, Plane):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = prim.y / dy
        t = np.where((dy < 0) & (t > 0), t, np.inf)
        normals[1] = 1.0
        return t, normals
    if isinstance(prim, Sphere):
        c = prim.center
        a = dx * dx + dy * dy + 1.0
        b = -2.0 * (dx * c[0] + dy * c[1] + c[2])
        disc = b * b - 4.0 * a * (float(c @ c) - prim.radius ** 2)
        hit = disc >= 0.0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t = np.where(hit, (-b - sq) / (2.0 * a), np.inf)
        t = np.where(t > 1e-6, t, np.inf)
        covered = np.isfinite(t)
        px, py, pz = t * dx, t * dy, t
        n = np.stack([(px - c[0]), (py - c[1]), (pz - c[2])]) / prim.radius
        normals = np.where(covered, n, 0.0)
        return t, normals
    if isinstance(prim, Box):
        d = np.stack([dx, dy, np.ones_like(dx)])
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = prim.lo[:, None, None] / d
            t2 = prim.hi[:, None, None] / d
        t_enter = np.minimum(t1, t2)
        t_exit = np.maximum(t1, t2)
        tmin = t_enter.max(axis=0)
        tmax = t_exit.min(axis=0)
        hit = (tmax >= tmin) & (tmin > 1e-6)
        t = np.where(hit, tmin, np.inf)
        axis = np.argmax(t_enter, axis=0)
        sign = -np.sign(np.take_along_axis(d, axis[None], axis=0)[0])
        for ax in range(3):
            normals[ax] = np.where(hit & (axis == ax), sign, 0.0)
        return t, normals
    raise DataError(f"unknown primitive type {type(prim).__name__}")


def generate_scene(seed: int, config: SceneConfig) -> DepthSample:
    """Render one scene: z-buffered depth and Lambert-shaded RGB."""
    scene = build_scene(seed, config)
    h, w = config.height, config.width
    zbuf = np.full((h, w), np.inf)
    rgb = np.broadcast_to(_SKY_COLOR[:, None, None], (3, h, w)).copy().astype(np.float64)
    for prim in scene.primitives:
        t, normals = primitive_depth(prim, h, w)
        winner = t < zbuf
        if not winner.any():
            continue
        zbuf = np.where(winner, t, zbuf)
        lambert = np.clip((normals * _LIGHT[:, None, None]).sum(axis=0), 0.0, None)
        shade = _AMBIENT + (1.0 - _AMBIENT) * lambert
        colored = prim.albedo[:, None, None] * shade
        rgb = np.where(winner, colored, rgb)
    valid = np.isfinite(zbuf) & (zbuf <= config.far)
    depth = np.where(valid, zbuf, config.far).astype(np.float32)
    return DepthSample(rgb=np.clip(rgb, 0.0, 1.0).astype(np.float32),
                       depth=depth, valid_mask=valid, seed=seed)


def normalize_depth(depth: np.ndarray, mask: np.ndarray,
                    spec: NormalizationSpec) -> tuple[np.ndarray, tuple[float, float]]:
    """Affine map sending valid-depth percentiles (p_lo, p_hi) to (-1, +1), clamped.

    Returns the normalized map and the realized (lo, hi) anchors for inversion.
    """
    d = np.asarray(depth, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if d.shape != m.shape:
        raise ShapeError(f"depth {d.shape} vs mask {m.shape}")
    if not m.any():
        raise DataError("normalize_depth: no valid pixels")
    lo, hi = np.percentile(d[m], [spec.p_lo, spec.p_hi])
    if not hi - lo > 1e-9:
        raise DegenerateNormalizationError(
            f"percentile spread {hi - lo:.3e} too small to normalize"
        )
    norm = np.clip(2.0 * (d - lo) / (hi - lo) - 1.0, -1.0, 1.0)
    return norm.astype(np.float32), (float(lo), float(hi))


def denormalize_depth(norm: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Inverse of normalize_depth on the unclamped interior."""
    if not hi > lo:
        raise ConfigError(f"denormalize: hi={hi} must exceed lo={lo}")
    n = np.asarray(norm, dtype=np.float64)
    return (lo + (n + 1.0) * 0.5 * (hi - lo)).astype(np.float32)


def build_splits(n_train: int, n_val: int, n_test: int, base_seed: int,
                 config: SceneConfig | None = None):
    """Disjoint deterministic splits: consecutive seed blocks from one base."""
    if min(n_train, n_val, n_test) < 0:
        raise ConfigError("split sizes must be non-negative")
    cfg = config if config is not None else SceneConfig()
    start = int(base_seed) * 10_000_000
    seeds = range(start, start + n_train + n_val + n_test)
    samples = [generate_scene(s, cfg) for s in seeds]
    return (samples[:n_train],
            samples[n_train:n_train + n_val],
            samples[n_train + n_val:])


def color_jitter(rgb: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random per-channel gain plus global brightness shift, clipped to [0, 1]."""
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ShapeError(f"color_jitter expects (3, H, W), got {rgb.shape}")
    gain = rng.uniform(0.8, 1.2, size=(3, 1, 1))
    shift = rng.uniform(-0.08, 0.08)
    return np.clip(rgb * gain + shift, 0.0, 1.0).astype(np.float32)
