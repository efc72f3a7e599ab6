import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from surfel_slam.core_geometry import (
    Intrinsics,
    Pose,
    backproject,
    compute_normal_map,
    exp_se3,
    exp_so3,
    log_se3,
    look_at,
    matrix_to_quat,
    quat_matrix_backward,
    quat_to_matrix,
    rotation_angle,
)
from surfel_slam.errors import GeometryError

K = Intrinsics(50.0, 52.0, 31.5, 23.5, 64, 48)


def random_pose(rng, scale=1.0):
    return exp_se3(scale * rng.normal(size=6))


def test_exp_log_round_trip():
    """Test that log_se3 inverts exp_se3 for twists away from pi."""
    rng = np.random.default_rng(0)
    for _ in range(50):
        xi = rng.normal(size=6)
        xi[3:] *= min(1.0, (np.pi - 0.1) / np.linalg.norm(xi[3:]))
        np.testing.assert_allclose(log_se3(exp_se3(xi)), xi, atol=1e-9)


def test_exp_small_angle_branch():
    """Test the series branch for tiny rotations."""
    xi = np.array([1e-3, -2e-3, 5e-4, 1e-8, -3e-8, 2e-8])
    np.testing.assert_allclose(log_se3(exp_se3(xi)), xi, atol=1e-12)
    assert exp_se3(xi).is_valid()


def test_exp_so3_matches_scipy():
    """Test the rotation exponential against scipy rotation vectors."""
    phi = np.array([0.3, -1.2, 0.7])
    np.testing.assert_allclose(exp_so3(phi), Rotation.from_rotvec(phi).as_matrix(), atol=1e-12)


def test_log_undefined_at_pi():
    """Test that a half-turn is rejected by the logarithm."""
    with pytest.raises(GeometryError):
        log_se3(Pose(np.diag([1.0, -1.0, -1.0]), np.zeros(3)))


def test_rotation_angle():
    """Test geodesic angle of an axis rotation."""
    assert rotation_angle(exp_so3([0.0, 0.0, 0.3])) == pytest.approx(0.3)
    assert rotation_angle(np.eye(3)) == 0.0


def test_pose_composition_associative():
    """Test associativity and inverse of pose composition."""
    rng = np.random.default_rng(1)
    a, b, c = (random_pose(rng) for _ in range(3))
    np.testing.assert_allclose(((a @ b) @ c).matrix(), (a @ (b @ c)).matrix(), atol=1e-12)
    np.testing.assert_allclose((a @ a.inverse()).matrix(), np.eye(4), atol=1e-12)
    assert (a @ b).is_valid()


def test_tum_round_trip():
    """Test camera-to-world TUM conversion."""
    pose = random_pose(np.random.default_rng(2))
    np.testing.assert_allclose(Pose.from_tum(pose.to_tum()).matrix(), pose.matrix(), atol=1e-12)
    # TUM stores the camera center as the translation
    np.testing.assert_allclose(pose.to_tum()[:3], pose.center, atol=1e-12)


def test_look_at_centers_target():
    """Test that the target projects to the principal point."""
    pose = look_at([0.3, -0.2, 0.1], [0.0, 0.5, 3.0])
    assert pose.is_valid()
    cam = pose.transform(np.array([0.0, 0.5, 3.0]))
    assert cam[2] > 0
    np.testing.assert_allclose(K.project(cam), [K.cx, K.cy], atol=1e-9)


def test_look_at_identity_view():
    """Test that looking down +z from the origin is the identity."""
    np.testing.assert_allclose(look_at([0, 0, 0], [0, 0, 1]).matrix(), np.eye(4), atol=1e-12)


def test_backproject_project_round_trip():
    """Test project(backproject(p, d)) = p."""
    rng = np.random.default_rng(3)
    for _ in range(20):
        pixel = rng.uniform([0, 0], [K.width - 1, K.height - 1])
        depth = rng.uniform(0.2, 8.0)
        np.testing.assert_allclose(K.project(backproject(pixel, depth, K)), pixel, atol=1e-9)


def test_backproject_rejects_non_positive_depth():
    """Test that zero depth cannot be back-projected."""
    with pytest.raises(GeometryError):
        backproject((3, 4), 0.0, K)


def test_intrinsics_validation():
    """Test rejection of bad focal lengths and principal points."""
    with pytest.raises(GeometryError):
        Intrinsics(0.0, 1.0, 2.0, 2.0, 4, 4)
    with pytest.raises(GeometryError):
        Intrinsics(1.0, 1.0, 5.0, 2.0, 4, 4)


def test_scaled_intrinsics():
    """Test that subsampled intrinsics address the same rays."""
    Ks = K.scaled(2)
    assert Ks.shape == (24, 32)
    np.testing.assert_allclose(Ks.ray_grid(), K.ray_grid()[::2, ::2], atol=1e-12)


def test_normal_map_tilted_plane():
    """Test normals of a plane tilted 30 degrees about x."""
    angle = np.deg2rad(30.0)
    normal = np.array([0.0, np.sin(angle), -np.cos(angle)])
    point = np.array([0.0, 0.0, 2.0])
    rays = K.ray_grid()
    depth = (point @ normal) / (rays @ normal)
    normals = compute_normal_map(depth, K)
    inner = normals[1:-1, 1:-1].reshape(-1, 3)
    np.testing.assert_allclose(inner, np.tile(normal, (len(inner), 1)), atol=1e-3)
    # facing the camera
    assert np.all((normals[1:-1, 1:-1] * rays[1:-1, 1:-1]).sum(-1) < 0)
    assert np.all(normals[0] == 0) and np.all(normals[:, -1] == 0)


def test_normal_map_invalid_neighbours():
    """Test that pixels next to missing depth get no normal."""
    depth = np.full(K.shape, 2.0)
    depth[10, 10] = 0.0
    normals = compute_normal_map(depth, K)
    assert np.all(normals[10, 10] == 0)
    assert np.all(normals[10, 11] == 0) and np.all(normals[9, 10] == 0)
    assert np.linalg.norm(normals[20, 20]) == pytest.approx(1.0)


def test_quaternion_conventions():
    """Test (w, x, y, z) quaternions against scipy."""
    rng = np.random.default_rng(4)
    q = rng.normal(size=(10, 4))
    xyzw = np.roll(q, -1, axis=1)
    np.testing.assert_allclose(quat_to_matrix(q), Rotation.from_quat(xyzw).as_matrix(), atol=1e-12)
    back = matrix_to_quat(quat_to_matrix(q))
    assert np.all(back[:, 0] >= 0)
    np.testing.assert_allclose(quat_to_matrix(back), quat_to_matrix(q), atol=1e-12)


def test_quat_to_matrix_shapes_and_scale():
    """Test a known rotation from an unnormalized quaternion and batched shapes."""
    q = 3.0 * np.array([np.cos(np.pi / 4), 0.0, 0.0, np.sin(np.pi / 4)])
    np.testing.assert_allclose(quat_to_matrix(q), [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-12)
    batch = np.random.default_rng(6).normal(size=(2, 5, 4))
    R = quat_to_matrix(batch)
    assert R.shape == (2, 5, 3, 3)
    np.testing.assert_allclose(R[1, 3], quat_to_matrix(batch[1, 3]), atol=1e-12)
    np.testing.assert_allclose(np.einsum("...ji,...jk->...ik", R, R), np.broadcast_to(np.eye(3), R.shape), atol=1e-12)


def test_quat_matrix_backward_finite_differences():
    """Test the quaternion chain rule against central differences."""
    rng = np.random.default_rng(5)
    q = rng.normal(size=(3, 4))
    G = rng.normal(size=(3, 3, 3))
    analytic = quat_matrix_backward(q, G)
    h = 1e-6
    numeric = np.zeros_like(q)
    for i in range(3):
        for j in range(4):
            qp, qm = q.copy(), q.copy()
            qp[i, j] += h
            qm[i, j] -= h
            numeric[i, j] = ((quat_to_matrix(qp) - quat_to_matrix(qm))[i] * G[i]).sum() / (2 * h)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-8)
