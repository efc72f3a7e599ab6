"""Analytic synthetic RGB-D scenes made of textured planes and boxes.

The world frame is y-down like the camera; fixtures place their first
camera at the origin looking along +z, so the first ground-truth pose is
the identity.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import imageio.v3 as iio
import numpy as np
from loguru import logger

from .core_geometry import Intrinsics, Pose, backproject_map, look_at
from .errors import DataError
from .io_datasets import TUM_DEPTH_SCALE, Frame, PointSet, voxel_downsample, write_trajectory_tum

FRAME_RATE = 30.0
TEXTURE_FREQ = 7.0


def _texture(points, base, phase):
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    f = TEXTURE_FREQ
    pattern = np.stack(
        [
            np.sin(f * x + phase) * np.cos(f * y) + 0.5 * np.sin(1.7 * f * z),
            np.sin(f * y + 2.0 * phase) * np.cos(f * z) + 0.5 * np.sin(1.3 * f * x),
            np.sin(f * z + 3.0 * phase) * np.cos(f * x) + 0.5 * np.sin(1.1 * f * y),
        ],
        axis=1,
    )
    return np.clip(np.asarray(base)[None, :] + 0.2 * pattern, 0.0, 1.0)


@dataclass
class Plane:
    """Infinite plane n . x = n . point; seen from either side."""

    point: np.ndarray
    normal: np.ndarray
    color: tuple = (0.5, 0.5, 0.5)
    phase: float = 0.0

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=float)
        self.normal = np.asarray(self.normal, dtype=float)
        self.normal = self.normal / np.linalg.norm(self.normal)

    def intersect(self, origin, dirs):
        denom = dirs @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = ((self.point - origin) @ self.normal) / denom
        return np.where(np.abs(denom) > 1e-12, lam, np.inf)

    def shade(self, points):
        return _texture(points, self.color, self.phase)


@dataclass
class Box:
    """Axis-aligned solid box; only its outside is visible."""

    center: np.ndarray
    half: np.ndarray
    color: tuple = (0.6, 0.4, 0.3)
    phase: float = 1.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.half = np.asarray(self.half, dtype=float)

    def intersect(self, origin, dirs):
        lo = self.center - self.half - origin
        hi = self.center + self.half - origin
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = lo[None, :] / dirs
            t2 = hi[None, :] / dirs
        t_near = np.fmax.reduce(np.fmin(t1, t2), axis=1)
        t_far = np.fmin.reduce(np.fmax(t1, t2), axis=1)
        hit = (t_far >= t_near) & (t_near > 0)
        return np.where(hit, t_near, np.inf)

    def shade(self, points):
        return _texture(points, self.color, self.phase)


@dataclass
class SyntheticScene:
    primitives: list = field(default_factory=list)
    near: float = 0.01

    @property
    def center(self):
        """Centroid of the boxes, or of the plane anchors when there are none."""
        boxes = [p.center for p in self.primitives if isinstance(p, Box)]
        anchors = boxes or [p.point for p in self.primitives]
        return np.mean(anchors, axis=0)

    def cast(self, pose: Pose, K: Intrinsics):
        """Exact camera depth (0 = no hit) and color of the first surface along each pixel ray."""
        rays = K.ray_grid().reshape(-1, 3)
        origin = pose.center
        dirs = rays @ pose.R
        hits = np.stack([p.intersect(origin, dirs) for p in self.primitives], axis=1)
        hits = np.where(hits > self.near, hits, np.inf)
        owner = np.argmin(hits, axis=1)
        depth = hits[np.arange(len(rays)), owner]
        found = np.isfinite(depth)
        color = np.zeros((len(rays), 3))
        for i, primitive in enumerate(self.primitives):
            sel = found & (owner == i)
            if sel.any():
                color[sel] = primitive.shade(origin + depth[sel, None] * dirs[sel])
        depth = np.where(found, depth, 0.0)
        return depth.reshape(K.shape), color.reshape(K.shape + (3,))


def render_synthetic(scene: SyntheticScene, pose: Pose, K: Intrinsics, noise=None, dropout=0.0,
                     rng=None, timestamp=0.0) -> Frame:
    """Ray-cast the scene; optional Gaussian depth noise (meters) and pixel dropout."""
    depth, color = scene.cast(pose, K)
    rng = rng if rng is not None else np.random.default_rng(0)
    valid = depth > 0
    if noise:
        depth = np.where(valid, np.maximum(depth + rng.normal(0.0, noise, depth.shape), 1e-3), 0.0)
    if dropout:
        depth = np.where(rng.random(depth.shape) < dropout, 0.0, depth)
    return Frame.from_rgbd(timestamp, color, depth, K)


def camera(width=320, height=240) -> Intrinsics:
    f = 0.8125 * width
    return Intrinsics(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)


@dataclass
class SyntheticSequence:
    name: str
    scene: SyntheticScene
    K: Intrinsics
    poses: list
    noise: float = 0.0
    dropout: float = 0.0
    seed: int = 0

    def __len__(self):
        return len(self.poses)

    @property
    def timestamps(self):
        return [i / FRAME_RATE for i in range(len(self.poses))]

    @property
    def groundtruth(self):
        return list(zip(self.timestamps, self.poses))

    def frames(self):
        rng = np.random.default_rng(self.seed)
        for timestamp, pose in self.groundtruth:
            yield render_synthetic(self.scene, pose, self.K, self.noise, self.dropout, rng, timestamp)

    def __iter__(self):
        return self.frames()


def room_scene():
    return SyntheticScene([
        Plane((0, 0, 3.0), (0, 0, -1), (0.55, 0.5, 0.45), 0.0),
        Plane((0, 0.9, 0), (0, -1, 0), (0.4, 0.45, 0.5), 0.7),
        Plane((0, -1.1, 0), (0, 1, 0), (0.6, 0.6, 0.55), 1.9),
        Plane((-1.5, 0, 0), (1, 0, 0), (0.5, 0.35, 0.3), 2.6),
        Plane((1.5, 0, 0), (-1, 0, 0), (0.3, 0.5, 0.35), 3.3),
        Box((0.35, 0.55, 2.0), (0.3, 0.35, 0.3), (0.7, 0.45, 0.3), 1.2),
        Box((-0.6, 0.6, 2.4), (0.25, 0.3, 0.25), (0.3, 0.4, 0.7), 4.1),
    ])


def edge_scene():
    """A box edge in front of a rear plane: the mixed-depth fixture."""
    return SyntheticScene([
        Plane((0, 0, 2.0), (0, 0, -1), (0.5, 0.55, 0.5), 0.3),
        Box((-0.45, 0.0, 1.2), (0.55, 1.5, 0.2), (0.7, 0.4, 0.3), 2.2),
    ])


def basin_scene():
    return SyntheticScene([
        Plane((0, 0, 2.5), (0, 0, -1), (0.5, 0.5, 0.45), 0.4),
        Plane((0, 0.9, 0), (0, -1, 0), (0.45, 0.4, 0.5), 1.4),
        Plane((-1.6, 0, 0), (1, 0, 0), (0.4, 0.5, 0.35), 2.4),
        Plane((1.6, 0, 0), (-1, 0, 0), (0.55, 0.35, 0.4), 3.4),
        Box((0.25, 0.3, 1.8), (0.25, 0.3, 0.25), (0.7, 0.5, 0.3), 0.9),
        Box((-0.45, -0.1, 2.1), (0.2, 0.25, 0.2), (0.3, 0.45, 0.7), 3.9),
    ])


def tilted_plane_scene(angle_deg=30.0):
    """One textured plane through (0, 0, 2) tilted about the camera x axis."""
    a = np.deg2rad(angle_deg)
    return SyntheticScene([Plane((0, 0, 2.0), (0, np.sin(a), -np.cos(a)), (0.5, 0.5, 0.5), 0.7)])


def smooth_trajectory(n_frames, amplitude=0.3, target=(0.0, 0.0, 2.5)):
    """Arc with a slight bob; frame 0 is the identity pose."""
    poses = []
    target = np.asarray(target, dtype=float)
    for i in range(n_frames):
        s = i / max(n_frames - 1, 1)
        eye = np.array([
            amplitude * np.sin(np.pi * s),
            -0.05 * np.sin(2.0 * np.pi * s),
            0.5 * amplitude * (1.0 - np.cos(np.pi * s)),
        ])
        look = target + np.array([0.5 * eye[0], 0.0, 0.0])
        poses.append(look_at(eye, look))
    return poses


def grid_poses(spacing=0.1, target=(0.0, 0.0, 2.5)):
    """3x3 grid of views in the z=0 plane, all looking along +z; index 4 is the center."""
    poses = []
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            eye = np.array([dx * spacing, dy * spacing, 0.0])
            poses.append(look_at(eye, eye + np.asarray(target)))
    return poses


FIXTURES = ("box50", "edge", "basin")


def synthetic_fixture(name, downscale=1, n_frames=None, noise=0.0, dropout=0.0, seed=0) -> SyntheticSequence:
    """Named, fully pinned synthetic sequences.

    box50  room with two boxes, 50 frames along a smooth arc, 320x240
    edge   box edge against a rear plane, 8 frames of small lateral motion, 160x120
    basin  3x3 grid of views 0.1 m apart (center view is index 4), 160x120
    """
    if name == "box50":
        n = n_frames or 50
        K, scene, poses = camera(320 // downscale, 240 // downscale), room_scene(), smooth_trajectory(n)
    elif name == "edge":
        n = n_frames or 8
        K, scene = camera(160 // downscale, 120 // downscale), edge_scene()
        poses = [look_at((0.02 * i, 0.0, 0.0), (0.02 * i, 0.0, 1.0)) for i in range(n)]
    elif name == "basin":
        K, scene, poses = camera(160 // downscale, 120 // downscale), basin_scene(), grid_poses()
    else:
        raise DataError(f"unknown synthetic fixture '{name}' (choose from {', '.join(FIXTURES)})")
    return SyntheticSequence(name, scene, K, poses, noise, dropout, seed)


def sample_surface(seq: SyntheticSequence, stride=4, voxel=0.01) -> PointSet:
    """Ground-truth surface points from exact depth at every ground-truth pose."""
    chunks, normals, colors = [], [], []
    for pose in seq.poses:
        depth, color = seq.scene.cast(pose, seq.K)
        frame = Frame.from_rgbd(0.0, color, depth, seq.K)
        depth, color, normal = frame.depth[::stride, ::stride], color[::stride, ::stride], frame.normal[::stride, ::stride]
        points = backproject_map(frame.depth, seq.K)[::stride, ::stride]
        valid = depth > 0
        inv = pose.inverse()
        chunks.append(inv.transform(points[valid]))
        normals.append(inv.rotate(normal[valid]))
        colors.append(color[valid])
    return voxel_downsample(PointSet(np.concatenate(chunks), np.concatenate(normals), np.concatenate(colors)), voxel)


def write_tum_sequence(seq: SyntheticSequence, directory):
    """Export as a TUM-RGBD directory readable by `load_tum`."""
    directory = Path(directory)
    try:
        (directory / "rgb").mkdir(parents=True, exist_ok=True)
        (directory / "depth").mkdir(parents=True, exist_ok=True)
        rgb_lines, depth_lines = ["# color images\n"], ["# depth maps\n"]
        for i, frame in enumerate(seq.frames()):
            stamp = f"{frame.timestamp:.6f}"
            iio.imwrite(directory / "rgb" / f"{stamp}.png", np.round(frame.color * 255.0).astype(np.uint8))
            raw = np.clip(np.round(frame.depth * TUM_DEPTH_SCALE), 0, 65535).astype(np.uint16)
            iio.imwrite(directory / "depth" / f"{stamp}.png", raw)
            rgb_lines.append(f"{stamp} rgb/{stamp}.png\n")
            depth_lines.append(f"{stamp} depth/{stamp}.png\n")
        (directory / "rgb.txt").write_text("".join(rgb_lines))
        (directory / "depth.txt").write_text("".join(depth_lines))
    except OSError as exc:
        raise DataError(f"cannot write sequence to {directory}: {exc}") from exc
    write_trajectory_tum(seq.groundtruth, directory / "groundtruth.txt")
    logger.info("wrote {} frames of synthetic:{} to {}", len(seq), seq.name, directory)
    return directory
