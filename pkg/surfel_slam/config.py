"""Run configuration.

Every section is a dataclass owned by the module it configures. Values are
layered, lowest precedence first:

    dataclass defaults
    YAML file (--config)
    environment  SURFEL_SLAM_<SECTION>__<FIELD>=<yaml scalar>
    CLI          --set section.field=value and the dedicated flags
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from pathlib import Path

import yaml
from loguru import logger

from .core_geometry import Intrinsics
from .errors import ConfigError
from .evaluation import BasinConfig
from .io_datasets import TUM_DEPTH_SCALE
from .mapping import MappingConfig
from .pipeline import KeyframeConfig
from .rasterizer import RenderConfig
from .surfel_map import ManagementConfig
from .tracking import TrackingConfig

ENV_PREFIX = "SURFEL_SLAM_"


@dataclass
class CameraConfig:
    """Intrinsics for TUM input; synthetic fixtures bring their own camera."""

    fx: float = 525.0
    fy: float = 525.0
    cx: float = 319.5
    cy: float = 239.5
    width: int = 640
    height: int = 480
    depth_scale: float = TUM_DEPTH_SCALE

    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.fx, self.fy, self.cx, self.cy, int(self.width), int(self.height))


@dataclass
class RunConfig:
    threads: int = 0
    seed: int = 0
    export_stride: int = 4
    progress: bool = True


SECTIONS = {
    "camera": CameraConfig,
    "run": RunConfig,
    "render": RenderConfig,
    "management": ManagementConfig,
    "mapping": MappingConfig,
    "tracking": TrackingConfig,
    "keyframe": KeyframeConfig,
    "basin": BasinConfig,
}


@dataclass
class SlamConfig:
    camera: CameraConfig = field(default_factory=CameraConfig)
    run: RunConfig = field(default_factory=RunConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    management: ManagementConfig = field(default_factory=ManagementConfig)
    mapping: MappingConfig = field(default_factory=MappingConfig)
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    keyframe: KeyframeConfig = field(default_factory=KeyframeConfig)
    basin: BasinConfig = field(default_factory=BasinConfig)

    def __post_init__(self):
        self.render.threads = self.run.threads
        self.basin.threads = self.run.threads or (os.cpu_count() or 1)

    @property
    def export_stride(self):
        return self.run.export_stride

    @property
    def threads(self):
        return self.render.workers


def _merge(base: dict, section: str, key: str, value, source: str):
    if section not in SECTIONS:
        raise ConfigError(f"{source}: unknown config section '{section}' (known: {', '.join(SECTIONS)})")
    known = {f.name for f in fields(SECTIONS[section])}
    if key not in known:
        raise ConfigError(f"{source}: unknown key '{section}.{key}'")
    base.setdefault(section, {})[key] = value


def from_dict(data: dict | None) -> SlamConfig:
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError("configuration root must be a mapping")
    checked = {}
    for section, values in data.items():
        if values is None:
            continue
        if not isinstance(values, dict):
            raise ConfigError(f"config section '{section}' must be a mapping")
        for key, value in values.items():
            _merge(checked, section, key, value, "config")
    try:
        return SlamConfig(**{name: SECTIONS[name](**values) for name, values in checked.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def env_overrides(environ=None):
    """(section, key, value) triples from SURFEL_SLAM_<SECTION>__<FIELD> variables."""
    environ = os.environ if environ is None else environ
    out = []
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):]
        if "__" not in rest:
            raise ConfigError(f"environment variable {name} must look like {ENV_PREFIX}<SECTION>__<FIELD>")
        section, key = rest.lower().split("__", 1)
        out.append((section, key, yaml.safe_load(raw)))
    return out


def parse_override(text: str):
    """'section.field=value' -> (section, field, parsed value)."""
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError(f"override '{text}' must look like section.field=value")
    lhs, raw = text.split("=", 1)
    section, key = lhs.strip().split(".", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override '{text}': {exc}") from exc
    return section, key, value


def load_config(path=None, overrides=(), environ=None) -> SlamConfig:
    data = {}
    if path is not None:
        path = Path(path)
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config file {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: configuration root must be a mapping")
        logger.debug("loaded config file {}", path)
    merged = {}
    for section, values in data.items():
        for key, value in (values or {}).items():
            _merge(merged, section, key, value, str(path))
    for section, key, value in env_overrides(environ):
        _merge(merged, section, key, value, "environment")
    for item in overrides:
        section, key, value = item if isinstance(item, tuple) else parse_override(item)
        _merge(merged, section, key, value, "command line")
    return from_dict(merged)


def to_dict(cfg: SlamConfig) -> dict:
    def plain(value):
        if isinstance(value, Enum):
            return value.value
        if isinstance(value, dict):
            return {k: plain(v) for k, v in value.items()}
        if isinstance(value, (list, tuple)):
            return [plain(v) for v in value]
        return value

    return plain(asdict(cfg))


def write_config(cfg: SlamConfig, path):
    try:
        Path(path).write_text(yaml.safe_dump(to_dict(cfg), sort_keys=False))
    except OSError as exc:
        raise ConfigError(f"cannot write effective config to {path}: {exc}") from exc
