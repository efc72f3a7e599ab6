from pathlib import Path

import pytest
import yaml

from surfel_slam.config import SlamConfig, from_dict, load_config, parse_override, to_dict, write_config
from surfel_slam.errors import ConfigError
from surfel_slam.rasterizer import DepthMode
from surfel_slam.tracking import TrackerKind

DEFAULT_YAML = Path(__file__).resolve().parents[1] / "data" / "default_config.yaml"


def test_defaults():
    """Test the built-in configuration."""
    cfg = load_config(environ={})
    assert cfg.render.depth_mode is DepthMode.ADAPTIVE
    assert cfg.tracking.tracker is TrackerKind.COUPLED
    assert cfg.tracking.radial_enabled
    assert cfg.mapping.map_every == 6
    assert cfg.keyframe.translation_threshold == 0.3
    assert cfg.camera.intrinsics().shape == (480, 640)


def test_shipped_defaults_file_matches_code():
    """Test that data/default_config.yaml lists exactly the built-in values."""
    shipped = yaml.safe_load(DEFAULT_YAML.read_text())
    expected = to_dict(SlamConfig())
    for section in ("render", "basin"):
        expected[section].pop("threads")
    assert shipped == expected
    assert to_dict(load_config(DEFAULT_YAML, environ={})) == to_dict(SlamConfig())


def test_yaml_file_layer(tmp_path):
    """Test values and enums read from a YAML file."""
    path = tmp_path / "cfg.yaml"
    path.write_text("render:\n  depth_mode: median\ntracking:\n  tracker: icp\n  iterations: 7\n")
    cfg = load_config(path, environ={})
    assert cfg.render.depth_mode is DepthMode.MEDIAN
    assert cfg.tracking.tracker is TrackerKind.ICP
    assert cfg.tracking.iterations == 7


def test_layer_precedence(tmp_path):
    """Test file < environment < command line."""
    path = tmp_path / "cfg.yaml"
    path.write_text("mapping:\n  map_every: 3\n  gamma_depth: 0.5\n")
    env = {"SURFEL_SLAM_MAPPING__MAP_EVERY": "4", "SURFEL_SLAM_TRACKING__RADIAL_ENABLED": "false", "HOME": "/root"}
    cfg = load_config(path, ["mapping.map_every=5"], environ=env)
    assert cfg.mapping.map_every == 5
    assert cfg.mapping.gamma_depth == 0.5
    assert cfg.tracking.radial_enabled is False


def test_run_threads_propagate():
    """Test that run.threads drives the renderer and the basin pool."""
    cfg = load_config(overrides=[("run", "threads", 3)], environ={})
    assert cfg.render.threads == 3
    assert cfg.basin.threads == 3


def test_parse_override():
    """Test YAML scalar parsing of --set values."""
    assert parse_override("tracking.icp_levels=[2, 1]") == ("tracking", "icp_levels", [2, 1])
    assert parse_override("render.tau = 1.0e-5") == ("render", "tau", 1e-5)
    with pytest.raises(ConfigError):
        parse_override("tau=1")


def test_unknown_keys_rejected(tmp_path):
    """Test that unknown sections and fields are configuration errors."""
    with pytest.raises(ConfigError, match="render.gamma"):
        load_config(overrides=["render.gamma=2"], environ={})
    with pytest.raises(ConfigError, match="optics"):
        load_config(overrides=["optics.fx=2"], environ={})
    with pytest.raises(ConfigError):
        load_config(environ={"SURFEL_SLAM_RENDER": "1"})
    path = tmp_path / "cfg.yaml"
    path.write_text("mapping:\n  learning_rate: 1\n")
    with pytest.raises(ConfigError):
        load_config(path, environ={})


def test_invalid_values_rejected():
    """Test that dataclass validation surfaces as ConfigError."""
    with pytest.raises(ConfigError):
        load_config(overrides=["render.tau=-1"], environ={})
    with pytest.raises(ConfigError):
        load_config(overrides=["render.depth_mode=deepest"], environ={})
    with pytest.raises(ConfigError):
        from_dict({"mapping": 3})
    with pytest.raises(ConfigError):
        from_dict([1, 2])


def test_unreadable_files(tmp_path):
    """Test missing and malformed config files."""
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml", environ={})
    bad = tmp_path / "bad.yaml"
    bad.write_text("render: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(bad, environ={})


def test_write_and_reload(tmp_path):
    """Test that the written effective config loads back unchanged."""
    cfg = load_config(overrides=["render.depth_mode=mean", "tracking.icp_levels=[2, 1]"], environ={})
    path = tmp_path / "config.yaml"
    write_config(cfg, path)
    again = load_config(path, environ={})
    assert to_dict(again) == to_dict(cfg)
    assert again.render.depth_mode is DepthMode.MEAN
