"""Surfel scene representation and its lifecycle (seeding, densify, prune).

The map is stored as parallel arrays (structure of arrays) so the rasterizer
and the optimizer can work on whole parameter groups at once.

Map PLY layout (binary little endian, one `vertex` element, float32):
    x y z            center p (world, meters)
    nx ny nz         normal t_w (world)
    scale_u scale_v  s_u, s_v (meters)
    opacity          alpha in (0, 1)
    red green blue   color in [0, 1]
    rot_0..rot_3     rotation quaternion (w, x, y, z)
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
from loguru import logger
from plyfile import PlyData, PlyElement

from .core_geometry import Intrinsics, Pose, matrix_to_quat, quat_to_matrix
from .errors import DataError, GeometryError

if TYPE_CHECKING:
    from .io_datasets import Frame
    from .rasterizer import RenderOutput

OPACITY_FLOOR = 0.005
PARAM_GROUPS = ("p", "q", "log_s", "logit_alpha", "color")


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def inverse_sigmoid(y):
    return np.log(y / (1.0 - y))


@dataclass
class ManagementConfig:
    transmission_threshold: float = 0.5
    depth_error_threshold: float = 0.1
    color_error_threshold: float = 0.1
    sample_stride: int = 4

    def __post_init__(self):
        if min(self.transmission_threshold, self.depth_error_threshold, self.color_error_threshold) <= 0:
            raise GeometryError("management thresholds must be positive")
        if self.sample_stride < 1:
            raise GeometryError("sample_stride must be >= 1")


@dataclass
class Surfel:
    p: np.ndarray
    q: np.ndarray
    log_s: np.ndarray
    logit_alpha: float
    color: np.ndarray

    @property
    def alpha(self):
        return float(sigmoid(self.logit_alpha))

    @property
    def scale(self):
        return np.exp(self.log_s)

    @property
    def rotation(self):
        """[t_u, t_v, t_w] as columns."""
        return quat_to_matrix(self.q[None])[0]


@dataclass
class SurfelMap:
    p: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    q: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    log_s: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    logit_alpha: np.ndarray = field(default_factory=lambda: np.zeros(0))
    color: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    # per-surfel management statistics
    depth_error: np.ndarray = field(default_factory=lambda: np.zeros(0))
    color_error: np.ndarray = field(default_factory=lambda: np.zeros(0))
    count: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self):
        return len(self.p)

    @classmethod
    def from_surfels(cls, surfels) -> "SurfelMap":
        smap = cls()
        smap.extend(
            np.array([s.p for s in surfels]).reshape(-1, 3),
            np.array([s.q for s in surfels]).reshape(-1, 4),
            np.array([s.log_s for s in surfels]).reshape(-1, 2),
            np.array([s.logit_alpha for s in surfels], dtype=float),
            np.array([s.color for s in surfels]).reshape(-1, 3),
        )
        return smap

    def surfel(self, i) -> Surfel:
        return Surfel(self.p[i].copy(), self.q[i].copy(), self.log_s[i].copy(),
                      float(self.logit_alpha[i]), self.color[i].copy())

    def params(self):
        return {name: getattr(self, name) for name in PARAM_GROUPS}

    @property
    def alpha(self):
        return sigmoid(self.logit_alpha)

    @property
    def scale(self):
        return np.exp(self.log_s)

    @property
    def rotation(self):
        """(N, 3, 3) rotations whose columns are t_u, t_v, t_w."""
        if len(self) == 0:
            return np.zeros((0, 3, 3))
        return quat_to_matrix(self.q)

    @property
    def normals(self):
        return self.rotation[:, :, 2]

    def copy(self) -> "SurfelMap":
        return SurfelMap(*(getattr(self, f).copy() for f in self.__dataclass_fields__))

    def append(self, surfel: Surfel):
        self.extend(surfel.p[None], surfel.q[None], surfel.log_s[None],
                    np.array([surfel.logit_alpha]), surfel.color[None])

    def extend(self, p, q, log_s, logit_alpha, color):
        n = len(p)
        self.p = np.concatenate([self.p, p])
        self.q = np.concatenate([self.q, q])
        self.log_s = np.concatenate([self.log_s, log_s])
        self.logit_alpha = np.concatenate([self.logit_alpha, logit_alpha])
        self.color = np.concatenate([self.color, color])
        self.depth_error = np.concatenate([self.depth_error, np.zeros(n)])
        self.color_error = np.concatenate([self.color_error, np.zeros(n)])
        self.count = np.concatenate([self.count, np.zeros(n, dtype=np.int64)])

    def keep(self, mask):
        for name in self.__dataclass_fields__:
            setattr(self, name, getattr(self, name)[mask])

    def reset_stats(self):
        self.depth_error[:] = 0.0
        self.color_error[:] = 0.0
        self.count[:] = 0

    def normalize(self):
        """Restore the parameter invariants after an optimizer step."""
        self.q /= np.linalg.norm(self.q, axis=1, keepdims=True)
        np.clip(self.color, 0.0, 1.0, out=self.color)

    def check_invariants(self, tol=1e-6):
        lengths = {len(getattr(self, f)) for f in self.__dataclass_fields__}
        if len(lengths) > 1:
            return False
        if len(self) == 0:
            return True
        R = self.rotation
        ortho = np.abs(np.einsum("nij,nik->njk", R, R) - np.eye(3)).max()
        return bool(
            np.all(np.abs(np.linalg.norm(self.q, axis=1) - 1) < tol)
            and ortho < tol
            and np.all(np.isfinite(self.log_s))
            and np.all((self.alpha > 0) & (self.alpha < 1))
            and np.all((self.color >= 0) & (self.color <= 1))
        )


def complete_tangents(normals):
    """Deterministic orthonormal tangents (t_u, t_v) for unit normals (N, 3)."""
    axis = np.tile(np.array([1.0, 0.0, 0.0]), (len(normals), 1))
    near_x = np.abs(normals[:, 0]) > 0.9
    axis[near_x] = [0.0, 1.0, 0.0]
    tu = np.cross(normals, axis)
    tu /= np.linalg.norm(tu, axis=1, keepdims=True)
    tv = np.cross(normals, tu)
    return tu, tv


def seed_surfels(pixels, frame: "Frame", pose: Pose, K: Intrinsics, stride=1):
    """Seed parameter arrays for many (col, row) pixels of a frame."""
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    cols, rows = pixels[:, 0], pixels[:, 1]
    depth = frame.depth[rows, cols]
    normal_c = frame.normal[rows, cols]
    usable = (depth > 0) & (np.linalg.norm(normal_c, axis=1) > 0.5)
    if not np.all(usable):
        bad = pixels[~usable][0]
        raise GeometryError(f"pixel ({bad[0]}, {bad[1]}) has no valid depth/normal to seed from")
    points_c = np.stack([(cols - K.cx) / K.fx, (rows - K.cy) / K.fy, np.ones(len(cols))], axis=1)
    points_c *= depth[:, None]
    inv = pose.inverse()
    p = inv.transform(points_c)
    tw = inv.rotate(normal_c)
    tw /= np.linalg.norm(tw, axis=1, keepdims=True)
    tu, tv = complete_tangents(tw)
    q = matrix_to_quat(np.stack([tu, tv, tw], axis=2))
    scale = depth * stride / K.mean_focal
    log_s = np.repeat(np.log(scale)[:, None], 2, axis=1)
    logit_alpha = np.full(len(p), inverse_sigmoid(0.5))
    color = np.clip(frame.color[rows, cols], 0.0, 1.0)
    return p, q.reshape(-1, 4), log_s, logit_alpha, color


def seed_surfel(pixel, frame: "Frame", pose: Pose, K: Intrinsics, stride=1) -> Surfel:
    p, q, log_s, logit_alpha, color = seed_surfels([pixel], frame, pose, K, stride)
    return Surfel(p[0], q[0], log_s[0], float(logit_alpha[0]), color[0])


def densify_mask(frame: "Frame", render: "RenderOutput", cfg: ManagementConfig):
    """Pixels on the sampling grid that fail any of the three reconstruction criteria."""
    H, W = frame.depth.shape
    grid = np.zeros((H, W), dtype=bool)
    offset = cfg.sample_stride // 2
    grid[offset::cfg.sample_stride, offset::cfg.sample_stride] = True
    usable = grid & (frame.depth > 0) & frame.normal_valid
    transparent = render.transmittance > cfg.transmission_threshold
    depth_bad = render.valid & (np.abs(render.depth - frame.depth) > cfg.depth_error_threshold)
    color_bad = np.abs(render.color - frame.color).mean(axis=-1) > cfg.color_error_threshold
    return usable & (transparent | depth_bad | color_bad)


def densify(smap: SurfelMap, frame: "Frame", render: "RenderOutput", pose: Pose,
            K: Intrinsics, cfg: ManagementConfig) -> int:
    """Seed surfels at sampled pixels that are transparent or badly reconstructed."""
    rows, cols = np.nonzero(densify_mask(frame, render, cfg))
    if len(rows) == 0:
        return 0
    smap.extend(*seed_surfels(np.stack([cols, rows], axis=1), frame, pose, K, cfg.sample_stride))
    logger.debug("densify added {} surfels (map size {})", len(rows), len(smap))
    return len(rows)


def accumulate_errors(smap: SurfelMap, render: "RenderOutput", frame: "Frame"):
    """Attribute per-pixel residuals to each pixel's dominant surfel."""
    mask = render.valid & (render.dominant_id >= 0)
    ids = render.dominant_id[mask]
    depth_ok = mask & (frame.depth > 0)
    depth_residual = np.where(depth_ok, np.abs(render.depth - frame.depth), 0.0)[mask]
    color_residual = np.abs(render.color - frame.color).mean(axis=-1)[mask]
    np.add.at(smap.depth_error, ids, depth_residual)
    np.add.at(smap.color_error, ids, color_residual)
    np.add.at(smap.count, ids, 1)


def prune(smap: SurfelMap, cfg: ManagementConfig) -> int:
    """Remove surfels with large average errors or negligible opacity."""
    seen = smap.count > 0
    denom = np.maximum(smap.count, 1)
    bad_depth = seen & (smap.depth_error / denom > 2 * cfg.depth_error_threshold)
    bad_color = seen & (smap.color_error / denom > 2 * cfg.color_error_threshold)
    faint = smap.alpha < OPACITY_FLOOR
    remove = bad_depth | bad_color | faint
    removed = int(remove.sum())
    if removed:
        smap.keep(~remove)
        logger.debug("prune removed {} surfels ({} depth, {} color, {} faint)",
                     removed, int(bad_depth.sum()), int(bad_color.sum()), int(faint.sum()))
    return removed


def write_map_ply(smap: SurfelMap, path):
    fields = ["x", "y", "z", "nx", "ny", "nz", "scale_u", "scale_v", "opacity",
              "red", "green", "blue", "rot_0", "rot_1", "rot_2", "rot_3"]
    columns = np.concatenate(
        [smap.p, smap.normals.reshape(-1, 3), smap.scale, smap.alpha[:, None], smap.color, smap.q], axis=1
    )
    elements = np.empty(len(smap), dtype=[(name, "<f4") for name in fields])
    for i, name in enumerate(fields):
        elements[name] = columns[:, i]
    try:
        PlyData([PlyElement.describe(elements, "vertex")], text=False, byte_order="<").write(str(path))
    except OSError as exc:
        raise DataError(f"cannot write map to {path}: {exc}") from exc


def read_map_ply(path) -> SurfelMap:
    try:
        vertex = PlyData.read(str(path))["vertex"]
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read map from {path}: {exc}") from exc
    col = lambda *names: np.stack([np.asarray(vertex[n], dtype=float) for n in names], axis=1)
    smap = SurfelMap()
    alpha = np.clip(np.asarray(vertex["opacity"], dtype=float), 1e-6, 1 - 1e-6)
    q = col("rot_0", "rot_1", "rot_2", "rot_3")
    smap.extend(
        col("x", "y", "z"),
        q / np.linalg.norm(q, axis=1, keepdims=True),
        np.log(col("scale_u", "scale_v")),
        inverse_sigmoid(alpha),
        col("red", "green", "blue"),
    )
    return smap
