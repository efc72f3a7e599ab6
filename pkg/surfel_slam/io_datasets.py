"""RGB-D frames, TUM-RGBD sequences, trajectories and point-cloud files.

TUM layout: rgb.txt and depth.txt list "timestamp relative/path.png"; the
optional groundtruth.txt lists "timestamp tx ty tz qx qy qz qw" with
camera-to-world poses. Depth PNGs are 16 bit, meters = raw / 5000.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import imageio.v3 as iio
import numpy as np
import pandas as pd
from loguru import logger
from plyfile import PlyData, PlyElement

from .core_geometry import Intrinsics, Pose, compute_normal_map
from .errors import DataError

TUM_DEPTH_SCALE = 5000.0
MAX_TIME_DIFFERENCE = 0.02


@dataclass
class Frame:
    timestamp: float
    color: np.ndarray
    depth: np.ndarray
    normal: np.ndarray

    def __post_init__(self):
        if self.color.shape[:2] != self.depth.shape or self.normal.shape[:2] != self.depth.shape:
            raise DataError(
                f"frame at t={self.timestamp}: color {self.color.shape[:2]} and depth "
                f"{self.depth.shape} resolutions differ"
            )
        if np.any(self.depth < 0):
            raise DataError(f"frame at t={self.timestamp}: negative depth values")

    @classmethod
    def from_rgbd(cls, timestamp, color, depth, K: Intrinsics) -> "Frame":
        """Build a frame and derive its normal map from the depth."""
        depth = np.asarray(depth, dtype=float)
        if depth.shape != K.shape:
            raise DataError(f"depth image {depth.shape} does not match intrinsics {K.shape}")
        return cls(float(timestamp), np.asarray(color, dtype=float), depth, compute_normal_map(depth, K))

    @property
    def shape(self):
        return self.depth.shape

    @property
    def normal_valid(self):
        return np.linalg.norm(self.normal, axis=-1) > 0.5

    def downsample(self, factor: int) -> "Frame":
        """Every `factor`-th pixel; matches `Intrinsics.scaled`."""
        if factor == 1:
            return self
        s = slice(None, None, factor)
        return Frame(self.timestamp, self.color[s, s], self.depth[s, s], self.normal[s, s])


@dataclass
class PointSet:
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    normals: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    colors: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __len__(self):
        return len(self.points)


def voxel_downsample(points: PointSet, voxel=0.01) -> PointSet:
    """Keep the first point falling in every occupied voxel."""
    if len(points) == 0:
        return points
    keys = np.floor(points.points / voxel).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    first.sort()
    return PointSet(points.points[first], points.normals[first], points.colors[first])


def associate(first: dict, second: dict, max_difference=MAX_TIME_DIFFERENCE):
    """Greedy nearest-timestamp matching; returns sorted (first_ts, second_ts) pairs.

    Candidates come from a sorted window search around each timestamp.
    """
    a = np.sort(np.fromiter(first, dtype=float, count=len(first)))
    b = np.sort(np.fromiter(second, dtype=float, count=len(second)))
    if len(a) == 0 or len(b) == 0:
        return []
    slack = 1e-9
    lo = np.searchsorted(b, a - max_difference - slack, side="left")
    hi = np.searchsorted(b, a + max_difference + slack, side="right")
    counts = hi - lo
    ai = np.repeat(np.arange(len(a)), counts)
    bi = np.repeat(lo, counts) + np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    diff = np.abs(a[ai] - b[bi])
    keep = diff < max_difference
    ai, bi, diff = ai[keep], bi[keep], diff[keep]
    order = np.lexsort((b[bi], a[ai], diff))
    used_a = np.zeros(len(a), dtype=bool)
    used_b = np.zeros(len(b), dtype=bool)
    matches = []
    for i, j in zip(ai[order], bi[order]):
        if not used_a[i] and not used_b[j]:
            used_a[i] = used_b[j] = True
            matches.append((float(a[i]), float(b[j])))
    return sorted(matches)


def read_file_list(path) -> dict:
    """TUM index file as {timestamp: remaining columns}."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing index file {path}")
    try:
        table = pd.read_csv(path, sep=r"\s+", comment="#", header=None, dtype=str)
    except pd.errors.EmptyDataError:
        return {}
    except (OSError, pd.errors.ParserError) as exc:
        raise DataError(f"cannot parse {path}: {exc}") from exc
    return {float(row[0]): list(row[1:]) for row in table.itertuples(index=False)}


def read_color(path):
    try:
        image = iio.imread(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read color image {path}: {exc}") from exc
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=2)
    return image[..., :3].astype(float) / 255.0


def read_depth(path, depth_scale=TUM_DEPTH_SCALE):
    try:
        raw = iio.imread(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read depth image {path}: {exc}") from exc
    if raw.ndim != 2:
        raise DataError(f"depth image {path} must be single channel")
    return raw.astype(float) / depth_scale


@dataclass
class TumSequence:
    directory: Path
    K: Intrinsics
    pairs: list
    groundtruth: list | None
    dropped: int
    depth_scale: float = TUM_DEPTH_SCALE

    def __len__(self):
        return len(self.pairs)

    def frames(self) -> Iterator[Frame]:
        for timestamp, rgb_path, depth_path in self.pairs:
            color = read_color(self.directory / rgb_path)
            depth = read_depth(self.directory / depth_path, self.depth_scale)
            if color.shape[:2] != depth.shape:
                raise DataError(f"{rgb_path} and {depth_path} have different resolutions")
            yield Frame.from_rgbd(timestamp, color, depth, self.K)

    def __iter__(self):
        return self.frames()


def load_tum(directory, K: Intrinsics, depth_scale=TUM_DEPTH_SCALE) -> TumSequence:
    """Index a TUM-RGBD directory; frames are decoded lazily on iteration."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"dataset directory {directory} does not exist")
    rgb = read_file_list(directory / "rgb.txt")
    depth = read_file_list(directory / "depth.txt")
    matches = associate(rgb, depth)
    pairs = [(a, rgb[a][0], depth[b][0]) for a, b in matches]
    dropped = len(rgb) - len(pairs)
    if dropped:
        logger.warning("{}: dropped {} rgb frames without depth within {} s", directory, dropped, MAX_TIME_DIFFERENCE)

    groundtruth = None
    gt_path = directory / "groundtruth.txt"
    if gt_path.is_file():
        groundtruth = read_trajectory_tum(gt_path)
    logger.info("{}: {} rgb-d frames, ground truth {}", directory, len(pairs), "yes" if groundtruth else "no")
    return TumSequence(directory, K, pairs, groundtruth, dropped, depth_scale)


def _fmt(x):
    return f"{x + 0.0:.9g}"


def write_trajectory_tum(trajectory, path):
    """Write (timestamp, T_CW) pairs as TUM lines of camera-to-world poses."""
    lines = []
    for timestamp, pose in trajectory:
        values = pose.to_tum()
        if values[6] < 0:
            values[3:] *= -1.0
        lines.append(f"{timestamp:.6f} " + " ".join(_fmt(v) for v in values))
    try:
        Path(path).write_text("".join(line + "\n" for line in lines))
    except OSError as exc:
        raise DataError(f"cannot write trajectory {path}: {exc}") from exc


def read_trajectory_tum(path):
    """Read TUM trajectory lines back into (timestamp, T_CW) pairs."""
    trajectory = []
    for timestamp, values in sorted(read_file_list(path).items()):
        if len(values) != 7:
            raise DataError(f"{path}: expected 8 columns at t={timestamp}")
        try:
            trajectory.append((timestamp, Pose.from_tum([float(v) for v in values])))
        except ValueError as exc:
            raise DataError(f"{path}: bad pose at t={timestamp}: {exc}") from exc
    return trajectory


def write_ply(points: PointSet, path):
    """Binary little-endian PLY with positions, normals and 8-bit colors."""
    vertex = np.empty(
        len(points),
        dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4"),
               ("red", "u1"), ("green", "u1"), ("blue", "u1")],
    )
    for i, name in enumerate(("x", "y", "z")):
        vertex[name] = points.points[:, i]
    for i, name in enumerate(("nx", "ny", "nz")):
        vertex[name] = points.normals[:, i]
    rgb = np.clip(np.round(points.colors * 255.0), 0, 255).astype(np.uint8)
    for i, name in enumerate(("red", "green", "blue")):
        vertex[name] = rgb[:, i]
    try:
        PlyData([PlyElement.describe(vertex, "vertex")], text=False, byte_order="<").write(str(path))
    except OSError as exc:
        raise DataError(f"cannot write point cloud {path}: {exc}") from exc


def read_ply(path) -> PointSet:
    try:
        vertex = PlyData.read(str(path))["vertex"]
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read point cloud {path}: {exc}") from exc
    names = vertex.data.dtype.names

    def cols(*keys, scale=1.0):
        if not all(k in names for k in keys):
            return np.zeros((len(vertex.data), 3))
        return np.stack([np.asarray(vertex[k], dtype=float) for k in keys], axis=1) / scale

    return PointSet(cols("x", "y", "z"), cols("nx", "ny", "nz"), cols("red", "green", "blue", scale=255.0))
