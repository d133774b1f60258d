"""Synthetic scene generator: ray geometry, z-buffering, normalization."""

import math

import numpy as np
import pytest

from vardepth.errors import (
    ConfigError,
    DataError,
    DegenerateNormalizationError,
    ShapeError,
)
from vardepth.synthdata import (
    FAMILIES,
    GENERATOR_VERSION,
    Box,
    NormalizationSpec,
    Plane,
    SceneConfig,
    Sphere,
    build_scene,
    build_splits,
    color_jitter,
    denormalize_depth,
    generate_scene,
    normalize_depth,
)


def ray_direction(i: int, j: int, h: int, w: int) -> tuple[float, float, float]:
    """Pinhole ray for pixel (i, j): unit z, focal 0.9*w, center of the grid."""
    focal = 0.9 * w
    dx = (j - (w - 1) / 2.0) / focal
    dy = ((h - 1) / 2.0 - i) / focal
    return dx, dy, 1.0


def scalar_hit(prim, dx: float, dy: float) -> float:
    """Closed-form first intersection along (dx, dy, 1), or +inf."""
    if isinstance(prim, Plane):
        if dy >= 0.0:
            return math.inf
        t = prim.y / dy
        return t if t > 0.0 else math.inf
    if isinstance(prim, Sphere):
        cx, cy, cz = (float(v) for v in prim.center)
        a = dx * dx + dy * dy + 1.0
        b = -2.0 * (dx * cx + dy * cy + cz)
        c = cx * cx + cy * cy + cz * cz - prim.radius**2
        disc = b * b - 4.0 * a * c
        if disc < 0.0:
            return math.inf
        t = (-b - math.sqrt(disc)) / (2.0 * a)
        return t if t > 1e-6 else math.inf
    if isinstance(prim, Box):
        t_near, t_far = -math.inf, math.inf
        for axis, d in enumerate((dx, dy, 1.0)):
            lo, hi = float(prim.lo[axis]), float(prim.hi[axis])
            if d == 0.0:
                if not lo <= 0.0 <= hi:  # ray parallel and outside the slab
                    return math.inf
                continue
            t1, t2 = lo / d, hi / d
            t_near = max(t_near, min(t1, t2))
            t_far = min(t_far, max(t1, t2))
        if t_far >= t_near and t_near > 1e-6:
            return t_near
        return math.inf
    raise AssertionError(f"unhandled primitive {type(prim).__name__}")


# -- z-buffer against a scalar ray tracer --------------------------------------


@pytest.mark.parametrize("family", FAMILIES)
def test_depth_is_the_scalar_ray_minimum(family):
    cfg = SceneConfig(height=24, width=32, family=family)
    for seed in (0, 1, 7):
        scene = build_scene(seed, cfg)
        sample = generate_scene(seed, cfg)
        for i in range(0, cfg.height, 5):
            for j in range(0, cfg.width, 5):
                dx, dy, _ = ray_direction(i, j, cfg.height, cfg.width)
                t = min(scalar_hit(p, dx, dy) for p in scene.primitives)
                if math.isfinite(t) and t <= cfg.far:
                    assert sample.valid_mask[i, j]
                    assert sample.depth[i, j] == pytest.approx(t, rel=1e-5)
                else:
                    assert not sample.valid_mask[i, j]
                    assert sample.depth[i, j] == np.float32(cfg.far)


def test_floor_pixel_depth_matches_flat_ground_formula():
    # Bottom rows look down at the floor plane: t = camera_height / (-dy).
    cfg = SceneConfig(height=32, width=32, family="empty")
    scene = build_scene(3, cfg)
    sample = generate_scene(3, cfg)
    i, j = cfg.height - 1, 5
    dx, dy, _ = ray_direction(i, j, cfg.height, cfg.width)
    assert dy < 0
    want = scene.camera_height / (-dy)
    assert sample.depth[i, j] == pytest.approx(want, rel=1e-6)


def test_sky_pixels_are_invalid_and_carry_the_far_plane():
    cfg = SceneConfig(height=24, width=24, family="empty")
    sample = generate_scene(11, cfg)
    top = sample.valid_mask[0]
    assert not top.any()  # horizon rows see no plane
    np.testing.assert_array_equal(
        sample.depth[~sample.valid_mask], np.float32(cfg.far))


# -- determinism and families ----------------------------------------------------


def test_generation_is_a_pure_function_of_seed_and_config():
    cfg = SceneConfig(height=24, width=32, family="indoor")
    a = generate_scene(42, cfg)
    b = generate_scene(42, cfg)
    np.testing.assert_array_equal(a.rgb, b.rgb)
    np.testing.assert_array_equal(a.depth, b.depth)
    np.testing.assert_array_equal(a.valid_mask, b.valid_mask)
    c = generate_scene(43, cfg)
    assert not np.array_equal(a.depth, c.depth)


def test_scene_streams_are_keyed_by_generator_version():
    cfg = SceneConfig(height=24, width=32, family="indoor")
    scene = build_scene(5, cfg)
    twin = np.random.default_rng((GENERATOR_VERSION, 5))
    assert scene.camera_height == pytest.approx(float(twin.uniform(1.2, 1.8)))


def test_families_have_their_documented_composition():
    cfg_empty = SceneConfig(family="empty")
    scene = build_scene(9, cfg_empty)
    assert len(scene.primitives) == 1
    assert isinstance(scene.primitives[0], Plane)

    indoor = build_scene(9, SceneConfig(family="indoor"))
    assert len(indoor.primitives) >= 4  # plane plus at least three objects
    assert any(isinstance(p, (Sphere, Box)) for p in indoor.primitives[1:])

    roadway = build_scene(9, SceneConfig(family="roadway"))
    assert all(isinstance(p, Box) for p in roadway.primitives[1:])
    # Flanking rule keeps the lane clear: boxes never straddle x = 0.
    for box in roadway.primitives[1:]:
        assert box.lo[0] * box.hi[0] > 0 or abs(box.lo[0]) < 1e-9


def test_sample_value_ranges():
    for family in FAMILIES:
        s = generate_scene(2, SceneConfig(height=24, width=32, family=family))
        assert s.rgb.shape == (3, 24, 32) and s.rgb.dtype == np.float32
        assert s.depth.shape == (24, 32) and s.depth.dtype == np.float32
        assert s.valid_mask.dtype == np.bool_
        assert (s.rgb >= 0.0).all() and (s.rgb <= 1.0).all()
        assert (s.depth > 0.0).all()
        assert (s.depth[s.valid_mask] <= 20.0).all()


def test_config_validation():
    with pytest.raises(ConfigError):
        SceneConfig(height=4, width=64)
    with pytest.raises(ConfigError):
        SceneConfig(height=48, width=60)  # not divisible by 8
    with pytest.raises(ConfigError):
        SceneConfig(family="underwater")


# -- splits ------------------------------------------------------------------------


def test_splits_use_disjoint_consecutive_seed_blocks():
    cfg = SceneConfig(height=24, width=32)
    train, val, test = build_splits(3, 2, 2, base_seed=1, config=cfg)
    assert [s.seed for s in train] == [10_000_000, 10_000_001, 10_000_002]
    assert [s.seed for s in val] == [10_000_003, 10_000_004]
    assert [s.seed for s in test] == [10_000_005, 10_000_006]
    with pytest.raises(ConfigError):
        build_splits(-1, 0, 0, base_seed=0, config=cfg)


# -- normalization -------------------------------------------------------------------


def test_normalize_denormalize_round_trip_on_the_interior():
    rng = np.random.default_rng(31)
    depth = rng.uniform(1.0, 10.0, size=(16, 16)).astype(np.float32)
    mask = np.ones((16, 16), dtype=bool)
    spec = NormalizationSpec(p_lo=0.0, p_hi=100.0)  # no clamping anywhere
    norm, (lo, hi) = normalize_depth(depth, mask, spec)
    assert norm.min() >= -1.0 and norm.max() <= 1.0
    back = denormalize_depth(norm, lo, hi)
    np.testing.assert_allclose(back, depth, rtol=1e-5)


def test_normalization_anchors_hit_the_requested_percentiles():
    depth = np.linspace(2.0, 12.0, 100).reshape(10, 10)
    mask = np.ones_like(depth, dtype=bool)
    norm, (lo, hi) = normalize_depth(depth, mask, NormalizationSpec(2.0, 98.0))
    assert lo == pytest.approx(np.percentile(depth, 2.0))
    assert hi == pytest.approx(np.percentile(depth, 98.0))
    # Values outside the anchors clamp to the ends.
    assert norm.min() == -1.0 and norm.max() == 1.0


def test_normalization_error_paths():
    depth = np.full((4, 4), 5.0)
    mask = np.ones((4, 4), dtype=bool)
    with pytest.raises(DegenerateNormalizationError):
        normalize_depth(depth, mask, NormalizationSpec())  # zero spread
    with pytest.raises(DataError):
        normalize_depth(depth, np.zeros((4, 4), bool), NormalizationSpec())
    with pytest.raises(ShapeError):
        normalize_depth(depth, np.ones((4, 5), bool), NormalizationSpec())
    with pytest.raises(ConfigError):
        NormalizationSpec(p_lo=50.0, p_hi=50.0)
    with pytest.raises(ConfigError):
        denormalize_depth(np.zeros((2, 2)), 3.0, 3.0)


# -- jitter --------------------------------------------------------------------------


def test_color_jitter_stays_in_range_and_is_seeded():
    rng = np.random.default_rng(37)
    rgb = rng.uniform(0, 1, size=(3, 8, 8)).astype(np.float32)
    a = color_jitter(rgb, np.random.default_rng(5))
    b = color_jitter(rgb, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)
    assert a.min() >= 0.0 and a.max() <= 1.0
    assert not np.array_equal(a, rgb)
    with pytest.raises(ShapeError):
        color_jitter(rgb[0], np.random.default_rng(0))
