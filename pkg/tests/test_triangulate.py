import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from profuse import synth
from profuse.triangulate import (
    EmptySceneError,
    SeedConfig,
    SeedPoints,
    dedup_voxels,
    extract_seeds,
    init_gaussians,
    triangulate_pair,
    triangulate_rays,
)

from conftest import simple_camera


def _two_cameras():
    K = np.array([[60.0, 0, 32], [0, 60, 32], [0, 0, 1]])
    a = synth.look_at(np.array([2.0, 0.0, 0.5]), np.zeros(3), K, 64, 64)
    b = synth.look_at(np.array([0.0, 2.5, 0.8]), np.zeros(3), K, 64, 64)
    return a, b


def test_rays_through_a_point_recover_it():
    a, b = _two_cameras()
    P = np.array([0.1, -0.2, 0.3])
    pa, _ = a.project(P[None])
    pb, _ = b.project(P[None])
    assert_allclose(triangulate_pair(a, pa[0], b, pb[0]), P, atol=1e-6)


def _distance_to_ray(x, c, d):
    return np.linalg.norm(np.cross(x - c, d))


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 0.5), st.floats(0, 2 * np.pi))
def test_skew_rays_midpoint_is_equidistant(gap, angle):
    # ray 1 along x through the origin, ray 2 offset by `gap` along z with direction rotated in the xy-plane
    c1, d1 = np.zeros(3), np.array([1.0, 0, 0])
    c2 = np.array([0.0, 0.0, gap])
    d2 = np.array([np.cos(angle + 0.5), np.sin(angle + 0.5), 0.0])
    if abs(np.cross(d1, d2)[2]) < 1e-3:
        return
    mid, _ = triangulate_rays(c1 - 5 * d1, d1, c2 - 5 * d2, d2)
    assert _distance_to_ray(mid, c1, d1) == pytest.approx(gap / 2, abs=1e-9)
    assert _distance_to_ray(mid, c2, d2) == pytest.approx(gap / 2, abs=1e-9)


def test_parallel_rays_rejected():
    d = np.array([0.0, 0, 1])
    _, status = triangulate_rays(np.zeros(3), d, np.array([1.0, 0, 0]), d)
    assert status == 1


def test_point_behind_camera_rejected():
    cam_a = simple_camera(position=(0, 0, 0))
    cam_b = simple_camera(position=(1, 0, 0))
    # rays diverge in front, so they meet behind both cameras
    c1, d1 = np.zeros(3), np.array([-0.3, 0, 1]) / np.linalg.norm([-0.3, 0, 1])
    c2, d2 = np.array([1.0, 0, 0]), np.array([0.3, 0, 1]) / np.linalg.norm([0.3, 0, 1])
    _, status = triangulate_rays(c1, d1, c2, d2, cam_a, cam_b)
    assert status == 2


def test_pixel_outside_image_is_an_error():
    a, b = _two_cameras()
    with pytest.raises(ValueError):
        triangulate_pair(a, [70.0, 10.0], b, [10.0, 10.0])


@settings(max_examples=60, deadline=None)
@given(st.tuples(*[st.floats(1, 63)] * 2), st.tuples(*[st.floats(1, 63)] * 2))
def test_symmetry_is_exact(pa, pb):
    a, b = _two_cameras()
    x1 = triangulate_pair(a, pa, b, pb)
    x2 = triangulate_pair(b, pb, a, pa)
    assert (x1 is None and x2 is None) or np.array_equal(x1, x2)


def test_zero_noise_seeds_lie_on_surfaces(small_scene):
    seeds = extract_seeds(small_scene.views, small_scene.warps, SeedConfig(stride=4))
    assert len(seeds) > 50
    d = small_scene.truth.surface_distances(seeds.positions).min(axis=1)
    assert d.max() < 1e-2


def test_seeds_reproject_into_support_pixels():
    jitter = 0.7
    s = synth.generate_scene(synth.SynthSpec(object_count=3, view_count=4, seed=7, warp_jitter=jitter))
    seeds = extract_seeds(s.views, s.warps, SeedConfig(stride=4))
    sup = seeds.support
    tol = max(2 * jitter, 1.0)
    for col in (0, 3):
        for v in np.unique(sup[:, col]).astype(int):
            rows = sup[:, col] == v
            uv, _ = s.views.cameras[v].project(seeds.positions[rows])
            err = np.linalg.norm(uv - sup[rows, col + 1:col + 3], axis=1)
            assert np.quantile(err, 0.99) <= tol


def test_unreachable_confidence_gives_empty_scene(small_scene):
    with pytest.raises(EmptySceneError):
        extract_seeds(small_scene.views, small_scene.warps, SeedConfig(tau_alpha=1.01))


def test_infinite_dedup_radius_keeps_one_seed(small_scene):
    seeds = extract_seeds(small_scene.views, small_scene.warps, SeedConfig(stride=8, dedup_radius=np.inf))
    assert len(seeds) == 1


def test_dedup_keeps_highest_confidence():
    pts = np.array([[0.01, 0.01, 0.01], [0.015, 0.01, 0.01], [0.5, 0.5, 0.5]])
    s = SeedPoints(pts, np.array([0.7, 0.9, 0.8]), np.zeros((3, 3)), np.zeros((3, 6)))
    out = dedup_voxels(s, 0.02)
    assert len(out) == 2
    assert_allclose(sorted(out.confidence), [0.8, 0.9])


def test_grid_seeds_scale_is_half_spacing():
    h = 0.1
    g = np.stack(np.meshgrid(*[np.arange(6) * h] * 3, indexing="ij"), -1).reshape(-1, 3)
    seeds = SeedPoints(g, np.ones(len(g)), np.full((len(g), 3), 0.3), np.zeros((len(g), 6)))
    scene = init_gaussians(seeds, scale_factor=0.5)
    assert_allclose(scene.scales, 0.5 * h, rtol=1e-6)
    assert_allclose(scene.rotations, np.tile([1, 0, 0, 0], (len(g), 1)))
    assert_allclose(scene.opacities, 0.8)
    assert_allclose(scene.colors, 0.3, atol=1e-7)


def test_single_seed_uses_fallback_scale():
    seeds = SeedPoints(np.zeros((1, 3)), np.ones(1), np.zeros((1, 3)), np.zeros((1, 6)))
    assert_allclose(init_gaussians(seeds, scale_factor=0.5).scales, 0.5 * 0.05)
