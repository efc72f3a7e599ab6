import numpy as np
import pytest

from surfel_slam.core_geometry import Pose, backproject_map, look_at
from surfel_slam.errors import DataError
from surfel_slam.synthetic import (
    FIXTURES,
    Box,
    Plane,
    SyntheticScene,
    camera,
    grid_poses,
    render_synthetic,
    sample_surface,
    synthetic_fixture,
    tilted_plane_scene,
)


def test_fronto_parallel_plane_depth():
    """Test exact depth of a plane two meters ahead."""
    K = camera(32, 24)
    frame = render_synthetic(SyntheticScene([Plane((0, 0, 2.0), (0, 0, -1))]), Pose.identity(), K)
    np.testing.assert_allclose(frame.depth, 2.0, rtol=0, atol=1e-12)
    np.testing.assert_allclose(frame.normal[5, 5], [0.0, 0.0, -1.0], atol=1e-9)
    assert np.all((frame.color >= 0) & (frame.color <= 1))


def test_depth_noise_statistics():
    """Test the standard deviation of injected depth noise."""
    K = camera(400, 300)
    scene = SyntheticScene([Plane((0, 0, 2.0), (0, 0, -1))])
    frame = render_synthetic(scene, Pose.identity(), K, noise=0.01, rng=np.random.default_rng(3))
    residual = frame.depth - 2.0
    assert residual.size >= 100_000
    assert 0.009 <= residual.std() <= 0.011


def test_dropout_zeroes_pixels():
    """Test that dropout produces missing depth at roughly the requested rate."""
    K = camera(200, 150)
    scene = SyntheticScene([Plane((0, 0, 2.0), (0, 0, -1))])
    frame = render_synthetic(scene, Pose.identity(), K, dropout=0.1, rng=np.random.default_rng(4))
    assert 0.08 <= (frame.depth == 0).mean() <= 0.12


def test_box_hides_plane_behind():
    """Test that the nearest primitive wins along a ray."""
    K = camera(32, 24)
    scene = SyntheticScene([Plane((0, 0, 3.0), (0, 0, -1)), Box((0, 0, 1.5), (0.2, 0.2, 0.2))])
    frame = render_synthetic(scene, Pose.identity(), K)
    assert frame.depth[12, 16] == pytest.approx(1.3)
    assert frame.depth[0, 0] == pytest.approx(3.0)


def test_fixtures_are_pinned():
    """Test frame counts, cameras and the identity first pose of every fixture."""
    sizes = {"box50": (50, 320), "edge": (8, 160), "basin": (9, 160)}
    for name in FIXTURES:
        seq = synthetic_fixture(name)
        frames, width = sizes[name]
        assert len(seq) == frames
        assert seq.K.width == width
        first = seq.poses[4] if name == "basin" else seq.poses[0]
        np.testing.assert_allclose(first.matrix(), np.eye(4), atol=1e-12)
    assert synthetic_fixture("box50", downscale=4).K.width == 80
    assert len(synthetic_fixture("box50", n_frames=5)) == 5


def test_fixture_frames_are_deterministic():
    """Test that a seeded noisy sequence renders identically twice."""
    seq = synthetic_fixture("edge", downscale=4, n_frames=2, noise=0.01, seed=7)
    a = [f.depth for f in seq.frames()]
    b = [f.depth for f in seq.frames()]
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_edge_fixture_has_depth_discontinuity():
    """Test that the edge fixture shows both the box and the rear plane."""
    seq = synthetic_fixture("edge")
    frame = next(iter(seq.frames()))
    row = frame.depth[60]
    assert row.min() == pytest.approx(1.0, abs=0.05)
    assert np.any(np.abs(row - 2.0) < 0.05)
    assert np.max(np.abs(np.diff(row))) > 0.5


def test_grid_poses_layout():
    """Test the 3x3 view grid with the center view at index 4."""
    poses = grid_poses(0.1)
    assert len(poses) == 9
    np.testing.assert_allclose(poses[4].matrix(), np.eye(4), atol=1e-12)
    np.testing.assert_allclose(poses[0].center, [-0.1, -0.1, 0.0], atol=1e-12)
    for pose in poses:
        np.testing.assert_allclose(pose.R, np.eye(3), atol=1e-12)


def test_scene_center():
    """Test the scene centroid used to aim trial cameras."""
    scene = SyntheticScene([Plane((0, 0, 5.0), (0, 0, -1)), Box((1, 0, 2), (0.1, 0.1, 0.1)), Box((-1, 0, 2), (0.1, 0.1, 0.1))])
    np.testing.assert_allclose(scene.center, [0.0, 0.0, 2.0])


def test_sample_surface_points_lie_on_plane():
    """Test ground-truth surface samples of a single plane."""
    seq = synthetic_fixture("edge", downscale=4, n_frames=2)
    seq.scene = SyntheticScene([Plane((0, 0, 2.0), (0, 0, -1))])
    cloud = sample_surface(seq, stride=2)
    assert len(cloud) > 0
    np.testing.assert_allclose(cloud.points[:, 2], 2.0, atol=1e-9)


def test_unknown_fixture():
    """Test that unknown fixture names are rejected."""
    with pytest.raises(DataError, match="box50"):
        synthetic_fixture("kitchen")


def test_look_at_faces_target():
    """Test that look_at puts the target on the optical axis."""
    pose = look_at((1.0, -0.5, 0.0), (0.0, 0.0, 2.5))
    np.testing.assert_allclose(pose.transform([0.0, 0.0, 2.5])[:2], 0.0, atol=1e-12)


def test_tilted_plane_points_lie_on_plane():
    """Test that back-projected depth of the tilted plane satisfies its equation."""
    K = camera(48, 36)
    frame = render_synthetic(tilted_plane_scene(30.0), Pose.identity(), K)
    n = np.array([0.0, np.sin(np.deg2rad(30.0)), -np.cos(np.deg2rad(30.0))])
    points = backproject_map(frame.depth, K).reshape(-1, 3)
    np.testing.assert_allclose(points @ n, 2.0 * n[2], atol=1e-9)
    # the plane recedes toward the bottom rows
    assert frame.depth[0].mean() < frame.depth[-1].mean()
