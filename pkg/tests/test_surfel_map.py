import numpy as np
import pytest

from surfel_slam.core_geometry import Intrinsics, Pose
from surfel_slam.errors import GeometryError
from surfel_slam.rasterizer import DepthMode, RenderConfig, RenderOutput, render
from surfel_slam.surfel_map import (
    ManagementConfig,
    SurfelMap,
    accumulate_errors,
    complete_tangents,
    densify,
    densify_mask,
    inverse_sigmoid,
    prune,
    read_map_ply,
    seed_surfel,
    write_map_ply,
)
from surfel_slam.synthetic import Plane, SyntheticScene, render_synthetic

K = Intrinsics(30.0, 30.0, 16.0, 12.0, 32, 24)


def plane_frame(depth=2.0):
    scene = SyntheticScene([Plane((0, 0, depth), (0, 0, -1), (0.6, 0.4, 0.2))])
    return render_synthetic(scene, Pose.identity(), K)


def test_seed_surfel_geometry():
    """Test that a seeded surfel sits on the observed plane facing the camera."""
    frame = plane_frame()
    s = seed_surfel((16, 12), frame, Pose.identity(), K, stride=4)
    np.testing.assert_allclose(s.p, [0.0, 0.0, 2.0], atol=1e-12)
    np.testing.assert_allclose(s.rotation[:, 2], [0.0, 0.0, -1.0], atol=1e-9)
    np.testing.assert_allclose(s.scale, [2.0 * 4 / 30.0] * 2)
    assert s.alpha == pytest.approx(0.5)
    np.testing.assert_allclose(s.color, frame.color[12, 16])


def test_seed_surfel_renders_input_depth():
    """Test that a lone seeded surfel reproduces the input depth at its pixel."""
    frame = plane_frame(2.5)
    smap = SurfelMap.from_surfels([seed_surfel((10, 7), frame, Pose.identity(), K, stride=4)])
    out = render(smap, Pose.identity(), K)
    assert out.depth[7, 10] == pytest.approx(2.5, abs=1e-3)


def test_seed_rejects_invalid_pixel():
    """Test that pixels without depth cannot be seeded."""
    frame = plane_frame()
    frame.depth[5, 5] = 0.0
    with pytest.raises(GeometryError):
        seed_surfel((5, 5), frame, Pose.identity(), K)


def test_complete_tangents_orthonormal():
    """Test tangent completion including normals near the x axis."""
    normals = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.6, 0.0, 0.8]])
    tu, tv = complete_tangents(normals)
    R = np.stack([tu, tv, normals], axis=2)
    np.testing.assert_allclose(np.einsum("nij,nik->njk", R, R), np.tile(np.eye(3), (3, 1, 1)), atol=1e-12)
    np.testing.assert_allclose(np.cross(tu, tv), normals, atol=1e-12)


def test_densify_empty_map_samples_grid():
    """Test that an empty map gets one surfel per sampled pixel."""
    frame = plane_frame()
    smap = SurfelMap()
    cfg = ManagementConfig(sample_stride=4)
    added = densify(smap, frame, RenderOutput.background(K), Pose.identity(), K, cfg)
    # border pixels have no normal
    expected = int(frame.normal_valid[2::4, 2::4].sum())
    assert added == expected == len(smap)
    assert smap.check_invariants()


def test_densify_skips_well_reconstructed_pixels():
    """Test that pixels already explained by the map are not densified again."""
    frame = plane_frame()
    frame.color[...] = 0.5
    smap = SurfelMap()
    cfg = ManagementConfig(sample_stride=1)
    densify(smap, frame, RenderOutput.background(K), Pose.identity(), K, cfg)
    smap.logit_alpha[:] = inverse_sigmoid(0.99)
    out = render(smap, Pose.identity(), K)
    mask = densify_mask(frame, out, cfg)
    assert mask[3:-3, 3:-3].sum() == 0


def test_accumulate_errors_and_prune():
    """Test dominant-surfel error attribution and pruning on average errors."""
    frame = plane_frame()
    smap = SurfelMap.from_surfels([seed_surfel((16, 12), frame, Pose.identity(), K, stride=4)])
    out = render(smap, Pose.identity(), K)
    target = plane_frame(2.3)
    accumulate_errors(smap, out, target)
    assert smap.count[0] > 0
    assert smap.depth_error[0] / smap.count[0] == pytest.approx(0.3, abs=1e-6)
    assert prune(smap, ManagementConfig()) == 1
    assert len(smap) == 0


def test_prune_faint_surfels():
    """Test removal of surfels below the opacity floor."""
    frame = plane_frame()
    smap = SurfelMap.from_surfels([seed_surfel(px, frame, Pose.identity(), K) for px in [(5, 5), (9, 9)]])
    smap.logit_alpha[1] = inverse_sigmoid(0.001)
    assert prune(smap, ManagementConfig()) == 1
    assert len(smap) == 1 and len(smap.count) == 1


def test_prune_keeps_unseen_surfels():
    """Test that surfels with no statistics are only pruned for opacity."""
    frame = plane_frame()
    smap = SurfelMap.from_surfels([seed_surfel((5, 5), frame, Pose.identity(), K)])
    smap.depth_error[0] = 10.0
    assert prune(smap, ManagementConfig()) == 0


def test_management_config_validation():
    """Test that non-positive thresholds are rejected."""
    with pytest.raises(GeometryError):
        ManagementConfig(depth_error_threshold=0.0)


def test_check_invariants_detects_bad_color():
    """Test invariant checking and normalize()."""
    frame = plane_frame()
    smap = SurfelMap.from_surfels([seed_surfel((5, 5), frame, Pose.identity(), K)])
    smap.color[0] = [1.5, 0.2, -0.1]
    smap.q[0] *= 2.0
    assert not smap.check_invariants()
    smap.normalize()
    assert smap.check_invariants()


def test_map_ply_round_trip(tmp_path):
    """Test writing and reading the map PLY."""
    frame = plane_frame()
    smap = SurfelMap()
    densify(smap, frame, RenderOutput.background(K), Pose.identity(), K, ManagementConfig(sample_stride=8))
    path = tmp_path / "map.ply"
    write_map_ply(smap, path)
    loaded = read_map_ply(path)
    assert len(loaded) == len(smap)
    np.testing.assert_allclose(loaded.p, smap.p, atol=1e-6)
    np.testing.assert_allclose(loaded.alpha, smap.alpha, atol=1e-6)
    np.testing.assert_allclose(loaded.normals, smap.normals, atol=1e-6)
    a = render(smap, Pose.identity(), K, RenderConfig(depth_mode=DepthMode.MEAN))
    b = render(loaded, Pose.identity(), K, RenderConfig(depth_mode=DepthMode.MEAN))
    np.testing.assert_allclose(a.depth, b.depth, atol=1e-5)
