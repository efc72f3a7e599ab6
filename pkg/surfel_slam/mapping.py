"""Surfel optimization against keyframe observations."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
from loguru import logger

from .core_geometry import Intrinsics
from .diff_backward import LossGrads, backward_surfels
from .errors import DataError, GeometryError, SlamError
from .optim import Adam
from .rasterizer import RenderConfig, RenderOutput, render
from .surfel_map import SurfelMap, accumulate_errors

TRACE_COLUMNS = ["iteration", "frame_id", "total", "color", "depth", "normal"]


@dataclass
class MappingConfig:
    gamma_depth: float = 1.0
    gamma_normal: float = 0.1
    iterations_per_window: int = 50
    map_every: int = 6
    lr_position: float = 1.6e-4
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    final_refine_multiplier: int = 10
    check_invariants: bool = False

    def __post_init__(self):
        if self.gamma_depth < 0 or self.gamma_normal < 0:
            raise GeometryError("mapping loss weights must be non-negative")
        if self.iterations_per_window <= 0 or self.map_every <= 0:
            raise GeometryError("iterations_per_window and map_every must be positive")
        if self.final_refine_multiplier < 0:
            raise GeometryError("final_refine_multiplier must be >= 0")

    def learning_rates(self, extent=1.0):
        return {
            "p": self.lr_position * extent,
            "q": self.lr_rotation,
            "log_s": self.lr_scale,
            "logit_alpha": self.lr_opacity,
            "color": self.lr_color,
        }


@dataclass
class MappingLoss:
    total: float
    color: float
    depth: float
    normal: float


def mapping_loss(out: RenderOutput, frame, cfg: MappingConfig):
    """L1 color + weighted L1 depth + weighted cosine normal term, with per-pixel gradients."""
    if out.depth.shape != frame.depth.shape:
        raise DataError(f"render {out.depth.shape} and frame {frame.depth.shape} resolutions differ")
    grads = LossGrads(np.zeros_like(out.color), np.zeros_like(out.depth), np.zeros_like(out.normal))

    diff = out.color - frame.color
    color_loss = float(np.abs(diff).mean())
    grads.color = np.sign(diff) / diff.size

    depth_loss = 0.0
    mask = (frame.depth > 0) & out.valid
    n_depth = int(mask.sum())
    if n_depth and cfg.gamma_depth > 0:
        d = np.where(mask, out.depth - frame.depth, 0.0)
        depth_loss = cfg.gamma_depth * float(np.abs(d).sum()) / n_depth
        grads.depth = cfg.gamma_depth * np.sign(d) / n_depth

    normal_loss = 0.0
    norm = np.linalg.norm(out.normal, axis=-1)
    nmask = mask & frame.normal_valid & (norm > 1e-12)
    n_normal = int(nmask.sum())
    if n_normal and cfg.gamma_normal > 0:
        safe = np.where(nmask, norm, 1.0)[..., None]
        unit = out.normal / safe
        cos = (unit * frame.normal).sum(-1)
        normal_loss = cfg.gamma_normal * float(np.where(nmask, 1.0 - cos, 0.0).sum()) / n_normal
        g = -(frame.normal - cos[..., None] * unit) / safe
        grads.normal = np.where(nmask[..., None], cfg.gamma_normal * g / n_normal, 0.0)

    loss = MappingLoss(color_loss + depth_loss + normal_loss, color_loss, depth_loss, normal_loss)
    return loss, grads


def scene_extent(smap: SurfelMap):
    """Radius of the map around its centroid, used to scale the position learning rate."""
    if len(smap) == 0:
        return 1.0
    return max(float(np.linalg.norm(smap.p - smap.p.mean(0), axis=1).max()), 0.1)


def optimize_window(smap: SurfelMap, frames, poses, K: Intrinsics, cfg: MappingConfig,
                    render_cfg: RenderConfig | None = None, iterations=None, frame_ids=None) -> pd.DataFrame:
    """Adam over the surfel parameters, visiting the window's frames round-robin.

    Management statistics are reset first and accumulated on every iteration.
    Returns the per-iteration loss trace.
    """
    if not frames:
        raise SlamError("a mapping window needs at least one frame")
    iterations = cfg.iterations_per_window if iterations is None else iterations
    frame_ids = list(frame_ids) if frame_ids is not None else list(range(len(frames)))
    if iterations <= 0 or len(smap) == 0:
        return pd.DataFrame(columns=TRACE_COLUMNS)

    render_cfg = render_cfg or RenderConfig()
    smap.reset_stats()
    opt = Adam(cfg.learning_rates(scene_extent(smap)))
    rows = []
    for it in range(iterations):
        k = it % len(frames)
        out = render(smap, poses[k], K, render_cfg)
        loss, grads = mapping_loss(out, frames[k], cfg)
        accumulate_errors(smap, out, frames[k])
        g = backward_surfels(smap, poses[k], K, out, grads, render_cfg)
        opt.step(smap.params(), g.as_dict())
        smap.normalize()
        if cfg.check_invariants and not smap.check_invariants():
            raise SlamError(f"surfel invariants violated after mapping iteration {it}")
        rows.append((it, frame_ids[k], loss.total, loss.color, loss.depth, loss.normal))
    trace = pd.DataFrame(rows, columns=TRACE_COLUMNS)
    logger.debug("mapping window: {} iterations, loss {:.5f} -> {:.5f}",
                 iterations, trace["total"].iloc[0], trace["total"].iloc[-1])
    return trace
