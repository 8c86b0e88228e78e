import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import random_cameras_points, svd_sigma_min
from vggtocc.geometry import (
    CameraModel, DegenerateDepthError, Z_NEAR, camera_to_world, project, projection_jacobian,
    random_rotation, rotation_about, sigma_min, unproject, world_to_camera,
)

CAM100 = CameraModel(100, 100, 50, 50, 100, 100)


def test_world_to_camera_examples():
    assert np.allclose(world_to_camera([1, 2, 3], CAM100), [1, 2, 3])
    R = rotation_about([0, 0, 1], np.pi / 2)
    cam = CAM100.with_pose(R, np.zeros(3))
    assert np.allclose(world_to_camera([1, 0, 0], cam), [0, 1, 0], atol=1e-15)
    cam = CAM100.with_pose(np.eye(3), [0, 0, -5])
    assert np.allclose(world_to_camera([0, 0, 10], cam), [0, 0, 5])


def test_project_examples():
    r = project([0, 0, 10], CAM100)
    assert (r.u, r.v, r.depth) == (0.5, 0.5, 10) and r.valid
    r = project([1, 0, 10], CAM100)
    assert r.u == pytest.approx(0.6, abs=1e-15) and r.v == pytest.approx(0.5)
    r = project([0, 0, -1], CAM100)
    assert not r.valid and np.all(r.jacobian == 0)


def test_jacobian_examples():
    J = projection_jacobian([0, 0, 10], CAM100)
    assert np.allclose(J, [[0.1, 0, 0], [0, 0.1, 0]], atol=1e-15)
    assert np.allclose(projection_jacobian([0, 0, 20], CAM100), J / 2, atol=1e-15)
    with pytest.raises(DegenerateDepthError):
        projection_jacobian([0, 0, Z_NEAR], CAM100)


def test_jacobian_matches_finite_differences():
    cams, pts = random_cameras_points(100, 3)
    h = 1e-5
    for cam, p in zip(cams, pts):
        J = projection_jacobian(p, cam)
        fd = np.zeros((2, 3))
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            a, b = project(p + e, cam), project(p - e, cam)
            fd[:, i] = [(a.u - b.u) / (2 * h), (a.v - b.v) / (2 * h)]
        assert np.abs(J - fd).max() / np.abs(J).max() < 1e-6


def test_sigma_min_examples():
    assert sigma_min(np.array([[0.1, 0, 0], [0, 0.1, 0]])) == pytest.approx(0.1, rel=1e-15)
    cam = CameraModel(500, 500, 500, 500, 1000, 1000)
    assert sigma_min(projection_jacobian([0, 0, 25], cam)) == pytest.approx(0.02, rel=1e-14)
    assert sigma_min(np.array([[1.0, 2, 3], [2.0, 4, 6]])) == 0.0


def test_sigma_min_matches_svd_oracle():
    cams, pts = random_cameras_points(1000, 0)
    J = np.stack([projection_jacobian(p, c) for c, p in zip(cams, pts)])
    ref = svd_sigma_min(J)
    assert np.max(np.abs(sigma_min(J) - ref) / ref) < 1e-10


@given(st.floats(1, 5000), st.integers(1, 4000), st.floats(0.01, 1000))
def test_on_axis_closed_form(f, W, Z):
    cam = CameraModel(f, f, W / 2, W / 2, W, W)
    s = sigma_min(projection_jacobian([0, 0, Z], cam))
    assert abs(s - (f / W) / Z) <= 1e-12 * (f / W) / Z


@given(st.integers(0, 10_000))
def test_sigma_min_rotation_invariant(seed):
    rng = np.random.default_rng(seed)
    J = rng.normal(size=(2, 3))
    R = random_rotation(rng)
    assert abs(sigma_min(J) - sigma_min(J @ R)) <= 1e-10 * max(sigma_min(J), 1e-300)


@given(st.integers(0, 10_000))
def test_project_unproject_roundtrip(seed):
    cams, pts = random_cameras_points(1, seed)
    cam, p = cams[0], pts[0]
    r = project(p, cam)
    assert np.abs(unproject(r.u, r.v, r.depth, cam) - p).max() < 1e-9


@given(st.integers(0, 10_000))
def test_sigma_min_decreases_along_ray(seed):
    rng = np.random.default_rng(seed)
    cams, _ = random_cameras_points(1, seed)
    cam = cams[0]
    d = np.array([rng.normal(0, 0.5), rng.normal(0, 0.5), 1.0])
    depths = np.sort(rng.uniform(0.1, 100, size=8))
    s = sigma_min(projection_jacobian(depths[:, None] * d, cam))
    assert np.all(np.diff(s) < 0)


def test_world_camera_roundtrip_and_center():
    rng = np.random.default_rng(1)
    cam = CAM100.with_pose(random_rotation(rng), rng.normal(size=3))
    p = rng.normal(size=(5, 3))
    assert np.allclose(camera_to_world(world_to_camera(p, cam), cam), p, atol=1e-12)
    assert np.allclose(world_to_camera(cam.center, cam), 0, atol=1e-12)


def test_camera_validation():
    with pytest.raises(ValueError):
        CameraModel(0, 1, 0, 0, 10, 10)
    with pytest.raises(ValueError):
        CameraModel(1, 1, 0, 0, 10, 10, R=np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(ValueError):
        CameraModel(1, 1, 0, 0, 0, 10)


def test_scaled_camera_keeps_normalized_coordinates():
    rng = np.random.default_rng(2)
    cam = CameraModel(40, 40, 24, 16, 48, 32, random_rotation(rng), np.zeros(3))
    small = cam.scaled(24, 16)
    p = np.array([0.3, -0.2, 4.0])
    a, b = project(p, cam), project(p, small)
    assert np.allclose([a.u, a.v], [b.u, b.v], atol=1e-15)
    assert np.allclose(a.jacobian, b.jacobian, atol=1e-15)
