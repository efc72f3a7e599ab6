"""Per-frame camera pose estimation.

Two trackers share one entry point: the coupled tracker descends the
rendering loss with analytic pose gradients, the ICP tracker aligns the
frame's depth against the map rendered at the initial pose.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import pandas as pd
from loguru import logger

from .core_geometry import Intrinsics, Pose, backproject_map, exp_se3
from .diff_backward import LossGrads, backward_pose
from .errors import GeometryError, TrackingError
from .io_datasets import Frame
from .optim import Adam
from .rasterizer import RenderConfig, RenderOutput, render
from .surfel_map import SurfelMap

TRACE_COLUMNS = ["iteration", "total", "color", "depth", "valid_pixels"]


class TrackerKind(str, Enum):
    COUPLED = "coupled"
    ICP = "icp"


@dataclass
class TrackingConfig:
    lambda_color: float = 0.5
    lambda_depth: float = 1.0
    iterations: int = 50
    lr_translation: float = 1e-3
    lr_rotation: float = 2e-3
    radial_enabled: bool = True
    tracker: TrackerKind = TrackerKind.COUPLED
    downsample: int = 1
    min_valid_fraction: float = 0.01
    icp_levels: list = field(default_factory=lambda: [4, 2, 1])
    icp_iterations: int = 10
    icp_max_distance: float = 0.1
    icp_max_angle_deg: float = 30.0
    icp_min_pairs: int = 100

    def __post_init__(self):
        self.tracker = TrackerKind(self.tracker)
        if self.lambda_color < 0 or self.lambda_depth < 0:
            raise GeometryError("tracking loss weights must be non-negative")
        if self.lambda_color == 0 and self.lambda_depth == 0:
            raise GeometryError("lambda_color and lambda_depth cannot both be zero")
        if self.iterations <= 0 or self.downsample < 1:
            raise GeometryError("iterations must be positive and downsample >= 1")

    @property
    def learning_rates(self):
        return np.array([self.lr_translation] * 3 + [self.lr_rotation] * 3)


def tracking_loss(out: RenderOutput, frame: Frame, cfg: TrackingConfig):
    """lambda_C * L1 color + lambda_D * L1 depth; raises when too little of the map is visible."""
    valid_pixels = int(out.valid.sum())
    if valid_pixels < cfg.min_valid_fraction * out.valid.size:
        raise TrackingError(
            f"only {valid_pixels} of {out.valid.size} pixels see the map; tracking is not possible"
        )
    grads = LossGrads(np.zeros_like(out.color), np.zeros_like(out.depth), np.zeros_like(out.normal))
    diff = out.color - frame.color
    color = float(np.abs(diff).mean())
    grads.color = cfg.lambda_color * np.sign(diff) / diff.size

    depth = 0.0
    mask = out.valid & (frame.depth > 0)
    n = int(mask.sum())
    if n:
        d = np.where(mask, out.depth - frame.depth, 0.0)
        depth = float(np.abs(d).sum()) / n
        grads.depth = cfg.lambda_depth * np.sign(d) / n
    total = cfg.lambda_color * color + cfg.lambda_depth * depth
    return (total, color, depth, valid_pixels), grads


def track_frame(smap: SurfelMap, frame: Frame, init_pose: Pose, K: Intrinsics, cfg: TrackingConfig,
                render_cfg: RenderConfig | None = None):
    """Coupled tracker; returns the lowest-loss pose seen and the residual trace."""
    if len(smap) == 0:
        raise TrackingError("cannot track against an empty map")
    render_cfg = render_cfg or RenderConfig()
    Ks = K.scaled(cfg.downsample)
    target = frame.downsample(cfg.downsample)
    opt = Adam({"xi": cfg.learning_rates})

    pose, best_pose, best_loss = init_pose, init_pose, np.inf
    rows = []
    for it in range(cfg.iterations + 1):
        out = render(smap, pose, Ks, render_cfg)
        try:
            terms, grads = tracking_loss(out, target, cfg)
        except TrackingError:
            if it == 0:
                raise
            logger.warning("tracking lost the map after {} iterations; keeping best pose", it)
            break
        rows.append((it, *terms))
        if terms[0] < best_loss:
            best_pose, best_loss = pose, terms[0]
        if it == cfg.iterations:
            break
        g = backward_pose(smap, pose, Ks, out, grads, render_cfg, cfg.radial_enabled).g
        step = opt.direction({"xi": g})["xi"]
        pose = exp_se3(step) @ pose
    trace = pd.DataFrame(rows, columns=TRACE_COLUMNS)
    logger.debug("tracking: loss {:.5f} -> best {:.5f}", trace["total"].iloc[0], best_loss)
    return best_pose, trace


def model_frame(out: RenderOutput, timestamp=0.0) -> Frame:
    """Rendered depth/normal as a frame, for ICP against the map."""
    norm = np.linalg.norm(out.normal, axis=-1, keepdims=True)
    usable = out.valid & (norm[..., 0] > 1e-12)
    normal = np.where(usable[..., None], out.normal / np.where(norm > 1e-12, norm, 1.0), 0.0)
    return Frame(timestamp, out.color, np.where(usable, out.depth, 0.0), normal)


def _icp_pairs(cur: Frame, model: Frame, T_rel: Pose, K: Intrinsics, cfg: TrackingConfig):
    """Projective association of current-frame points into the model image."""
    ok = (cur.depth > 0) & cur.normal_valid
    v = T_rel.transform(backproject_map(cur.depth, K)[ok])
    nv = T_rel.rotate(cur.normal[ok])
    front = v[:, 2] > 1e-6
    v, nv = v[front], nv[front]
    px = np.rint(K.project(v)).astype(np.int64)
    inside = (px[:, 0] >= 0) & (px[:, 0] < K.width) & (px[:, 1] >= 0) & (px[:, 1] < K.height)
    v, nv, px = v[inside], nv[inside], px[inside]
    cols, rows = px[:, 0], px[:, 1]
    dm = model.depth[rows, cols]
    nm = model.normal[rows, cols]
    has = (dm > 0) & model.normal_valid[rows, cols]
    y = np.stack([(cols - K.cx) / K.fx, (rows - K.cy) / K.fy, np.ones(len(cols))], axis=1) * dm[:, None]
    close = np.linalg.norm(v - y, axis=1) <= cfg.icp_max_distance
    aligned = (nv * nm).sum(1) >= np.cos(np.deg2rad(cfg.icp_max_angle_deg))
    keep = has & close & aligned
    return v[keep], y[keep], nm[keep]


def icp_track(frame: Frame, model: Frame, init_pose: Pose, K: Intrinsics, cfg: TrackingConfig | None = None) -> Pose:
    """Coarse-to-fine point-to-plane ICP of `frame` against `model` seen from `init_pose`."""
    cfg = cfg or TrackingConfig(tracker=TrackerKind.ICP)
    T_rel = Pose.identity()
    for level, factor in enumerate(cfg.icp_levels):
        Ks = K.scaled(factor)
        cur, mod = frame.downsample(factor), model.downsample(factor)
        for it in range(cfg.icp_iterations):
            v, y, n = _icp_pairs(cur, mod, T_rel, Ks, cfg)
            if level == 0 and it == 0 and len(v) < cfg.icp_min_pairs:
                raise TrackingError(f"ICP found {len(v)} pairs at the coarsest level, need {cfg.icp_min_pairs}")
            if len(v) < 6:
                logger.warning("ICP: {} pairs at level x{}; stopping", len(v), factor)
                break
            J = np.concatenate([n, np.cross(v, n)], axis=1)
            e = ((v - y) * n).sum(1)
            A = J.T @ J
            b = -J.T @ e
            # least-norm solution when the geometry leaves directions unconstrained
            xi = np.linalg.lstsq(A, b, rcond=1e-10)[0]
            T_rel = exp_se3(xi) @ T_rel
            logger.debug("ICP x{} iter {}: {} pairs, residual {:.6f}", factor, it, len(v), float(np.abs(e).mean()))
            if np.linalg.norm(xi) < 1e-12:
                break
    return T_rel.inverse() @ init_pose


def track(smap: SurfelMap, frame: Frame, init_pose: Pose, K: Intrinsics, cfg: TrackingConfig,
          render_cfg: RenderConfig | None = None):
    """Dispatch on `cfg.tracker`; returns (pose, trace)."""
    if cfg.tracker is TrackerKind.ICP:
        if len(smap) == 0:
            raise TrackingError("cannot track against an empty map")
        out = render(smap, init_pose, K, render_cfg)
        pose = icp_track(frame, model_frame(out, frame.timestamp), init_pose, K, cfg)
        return pose, pd.DataFrame(columns=TRACE_COLUMNS)
    return track_frame(smap, frame, init_pose, K, cfg, render_cfg)
