import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from profuse.scene_model import (
    Camera,
    ClusterConfig,
    GaussianScene,
    MaskSet,
    QueryConfig,
    RenderConfig,
    WarpField,
    covariances,
    quat_to_rotmat,
    validate_scene,
)

from conftest import simple_camera


def _scene(n=3, **over):
    rng = np.random.default_rng(0)
    q = rng.normal(size=(n, 4))
    fields = dict(positions=rng.normal(size=(n, 3)), scales=np.full((n, 3), 0.1),
                  rotations=q / np.linalg.norm(q, axis=1, keepdims=True), opacities=np.full(n, 0.8),
                  colors=np.full((n, 3), 0.5))
    fields.update(over)
    return GaussianScene(**fields)


def test_valid_scene_has_empty_report():
    assert validate_scene(_scene()) == []


def test_opacity_violation_names_index_and_field():
    report = validate_scene(_scene(opacities=[0.8, 1.5, 0.2]))
    assert report == ["gaussian 1: opacity outside [0, 1]"]


def test_descriptor_norm_violation_reported():
    d = np.eye(3)
    d[2] *= 0.5
    report = validate_scene(_scene().with_descriptors(d, np.ones(3, bool)))
    assert len(report) == 1 and "gaussian 2" in report[0] and "normalized" in report[0]


def test_unlabeled_gaussian_must_carry_zero_descriptor():
    d = np.eye(3)
    assert validate_scene(_scene().with_descriptors(d, [True, True, False]))
    d[2] = 0
    assert validate_scene(_scene().with_descriptors(d, [True, True, False])) == []


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 1e-3))
def test_quaternion_gives_rotation(q):
    R = quat_to_rotmat(np.asarray(q) / np.linalg.norm(q))
    assert_allclose(R @ R.T, np.eye(3), atol=1e-9)
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_covariance_from_scale_and_rotation():
    scales = np.array([[1.0, 2.0, 3.0]])
    assert_allclose(covariances(scales, np.array([[1.0, 0, 0, 0]]))[0], np.diag([1.0, 4.0, 9.0]))
    # 90 degrees about z swaps the x and y variances
    c = np.sqrt(0.5)
    assert_allclose(covariances(scales, np.array([[c, 0, 0, c]]))[0], np.diag([4.0, 1.0, 9.0]), atol=1e-12)


def test_camera_rejects_bad_intrinsics_and_rotation():
    with pytest.raises(ValueError, match="focal"):
        Camera(np.diag([0.0, 1.0, 1.0]), np.eye(4), 4, 4)
    T = np.eye(4)
    T[0, 0] = 2
    with pytest.raises(ValueError, match="orthonormal"):
        Camera(np.eye(3), T, 4, 4)
    with pytest.raises(ValueError, match="width"):
        Camera(np.eye(3), np.eye(4), 0, 4)


def test_camera_projection_and_rays_are_inverse():
    cam = simple_camera(position=(0.5, -0.2, -1.0))
    pts = np.array([[0.3, 0.1, 2.0], [-0.4, 0.2, 3.0]])
    uv, z = cam.project(pts)
    c, d = cam.rays(uv)
    t = np.linalg.norm(pts - c, axis=1)
    assert_allclose(c + t[:, None] * d, pts, atol=1e-12)
    assert np.all(z > 0)


def test_mask_set_validates_labels_and_norms():
    with pytest.raises(ValueError, match="exceeds"):
        MaskSet(0, np.full((2, 2), 2), np.eye(1, 4))
    with pytest.raises(ValueError, match="unit norm"):
        MaskSet(0, np.ones((2, 2)), 2 * np.eye(1, 4))
    ms = MaskSet(0, np.array([[0, 1], [1, 0]]), np.eye(1, 4))
    assert ms.mask_count == 1 and ms.label_map.dtype == np.uint16


def test_warp_field_rejects_out_of_range_confidence():
    with pytest.raises(ValueError):
        WarpField(0, 1, np.zeros((2, 2, 2)), np.full((2, 2), 1.5))
    with pytest.raises(ValueError):
        WarpField(0, 1, np.full((2, 2, 2), np.nan), np.ones((2, 2)))


def test_config_invariants():
    with pytest.raises(ValueError):
        ClusterConfig(s_min=0)
    with pytest.raises(ValueError):
        RenderConfig(top_k=0)
    with pytest.raises(ValueError):
        RenderConfig(alpha_cutoff=0)
    with pytest.raises(ValueError):
        QueryConfig(shortlist_size=0)
    with pytest.raises(ValueError):
        QueryConfig(gamma=1.5)
    # thresholds above 1 are allowed; they simply never pass
    assert ClusterConfig(tau_iou=1.01).tau_iou == 1.01
