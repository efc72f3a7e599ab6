"""Analytic gradients of the rendered buffers.

The backward pass replays each tile's forward traversal (`TileState`) and
accumulates gradients back to front. Pixels whose depth or normal came from
a single intersection (median depth, adaptive substitution) route the
gradient to that intersection only; the selection itself is treated as a
constant of the forward pass.

Pose gradients are taken with respect to a left-multiplied twist,
T <- exp(xi) T, so they live in the camera frame.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from loguru import logger

from .core_geometry import Intrinsics, Pose, quat_matrix_backward
from .errors import GeometryError
from .rasterizer import (
    DepthMode,
    RenderConfig,
    RenderOutput,
    TileState,
    map_tiles,
    prepare_view,
    tile_candidates,
    tile_layout,
)
from .surfel_map import SurfelMap


@dataclass
class LossGrads:
    """dL/dC, dL/dD, dL/dN per pixel."""

    color: np.ndarray
    depth: np.ndarray
    normal: np.ndarray

    @classmethod
    def zeros(cls, K: Intrinsics) -> "LossGrads":
        H, W = K.shape
        return cls(np.zeros((H, W, 3)), np.zeros((H, W)), np.zeros((H, W, 3)))

    def restricted(self, mask) -> "LossGrads":
        """Copy with every pixel outside `mask` zeroed."""
        mask = np.asarray(mask, dtype=bool)
        return LossGrads(
            np.where(mask[..., None], self.color, 0.0),
            np.where(mask, self.depth, 0.0),
            np.where(mask[..., None], self.normal, 0.0),
        )


@dataclass
class SurfelGrads:
    p: np.ndarray
    q: np.ndarray
    log_s: np.ndarray
    logit_alpha: np.ndarray
    color: np.ndarray

    @classmethod
    def zeros(cls, n) -> "SurfelGrads":
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 2)), np.zeros(n), np.zeros((n, 3)))

    def as_dict(self):
        return {
            "p": self.p,
            "q": self.q,
            "log_s": self.log_s,
            "logit_alpha": self.logit_alpha,
            "color": self.color,
        }


@dataclass
class PoseGrad:
    g: np.ndarray

    @property
    def translation(self):
        return self.g[:3]

    @property
    def rotation(self):
        return self.g[3:]


@dataclass
class _TileGrads:
    """Per-candidate gradients in the camera frame."""

    pc: np.ndarray
    tu: np.ndarray
    tv: np.ndarray
    nc: np.ndarray
    log_s: np.ndarray
    alpha: np.ndarray
    color: np.ndarray


def _tile_backward(state: TileState, selected, gC, gD, gN, cfg: RenderConfig, radial=True) -> _TileGrads:
    _, _, depth_index, normal_index = state.outputs(selected, cfg)
    P = len(state.rays)
    rows = np.arange(P)
    w = state.w

    mean_px = state.has & (depth_index < 0) & (cfg.depth_mode is not DepthMode.MEDIAN)
    gD_mean = np.where(mean_px, gD / np.where(state.has, state.W, 1.0), 0.0)
    gN_blend = np.where((normal_index < 0)[:, None], gN, 0.0)

    g_w = (
        gC @ state.color.T
        + gD_mean[:, None] * (state.z - state.mean_depth[:, None])
        + gN_blend @ state.n_render.T
    )
    g_w = np.where(state.contrib, g_w, 0.0)

    # w_k = a_k T_k: later weights depend on a_k through their transmittance
    gw_w = g_w * w
    behind = np.cumsum(gw_w[:, ::-1], axis=1)[:, ::-1] - gw_w
    g_a = np.where(state.contrib, state.T * g_w - behind / np.maximum(1.0 - state.a, 1e-12), 0.0)

    g_alpha = (g_a * state.G).sum(0)
    g_G = g_a * state.alpha[None]
    gu = -state.u * state.G * g_G
    gv = -state.v * state.G * g_G

    gz = gD_mean[:, None] * w
    at_index = depth_index >= 0
    np.add.at(gz, (rows[at_index], depth_index[at_index]), gD[at_index])

    g_nrender = w.T @ gN_blend
    at_normal = normal_index >= 0
    np.add.at(g_nrender, normal_index[at_normal], gN[at_normal])

    gu_s = gu / state.su[None]
    gv_s = gv / state.sv[None]
    g_r = gu_s[..., None] * state.tu[None] + gv_s[..., None] * state.tv[None]
    g_tu = np.einsum("pk,pkj->kj", gu_s, state.r)
    g_tv = np.einsum("pk,pkj->kj", gv_s, state.r)
    g_log_s = np.stack([-(gu * state.u).sum(0), -(gv * state.v).sum(0)], axis=1)

    # lambda = (n . pc) / (n . d), r = lambda d - pc
    g_lam = np.einsum("pkj,pj->pk", g_r, state.rays)
    if radial:
        g_lam = g_lam + gz
    coef = g_lam / state.b
    g_pc = -g_r.sum(0) + coef.sum(0)[:, None] * state.n
    g_nc = -np.einsum("pk,pkj->kj", coef, state.r) + g_nrender * state.sign[:, None]
    if not radial:
        g_pc[:, 2] += gz.sum(0)

    return _TileGrads(g_pc, g_tu, g_tv, g_nc, g_log_s, g_alpha, w.T @ gC)


def _check_shapes(K: Intrinsics, grads: LossGrads):
    H, W = K.shape
    if grads.color.shape != (H, W, 3) or grads.depth.shape != (H, W) or grads.normal.shape != (H, W, 3):
        raise GeometryError(f"loss gradient buffers do not match the {W}x{H} image")


def _replay(smap, pose, K, render: RenderOutput, grads: LossGrads, cfg, radial):
    """Run the tile backward over all tiles; results come back in tile order."""
    _check_shapes(K, grads)
    cfg = replace(cfg or RenderConfig(), depth_mode=render.depth_mode)
    view = prepare_view(smap, pose, K, cfg)
    if len(view) == 0:
        return view, []
    rays = K.ray_grid()

    def run(tile):
        r0, r1, c0, c1 = tile
        gC = grads.color[r0:r1, c0:c1].reshape(-1, 3)
        gD = grads.depth[r0:r1, c0:c1].ravel()
        gN = grads.normal[r0:r1, c0:c1].reshape(-1, 3)
        if not (gC.any() or gD.any() or gN.any()):
            return None
        cand = tile_candidates(view, tile)
        if len(cand) == 0:
            return None
        state = TileState(view, rays[r0:r1, c0:c1].reshape(-1, 3), cand, cfg)
        selected = render.selected[r0:r1, c0:c1].ravel()
        return cand, _tile_backward(state, selected, gC, gD, gN, cfg, radial)

    results = map_tiles(run, tile_layout(K, cfg.tile_size), cfg.workers)
    return view, [r for r in results if r is not None]


def backward_surfels(smap: SurfelMap, pose: Pose, K: Intrinsics, render: RenderOutput,
                     grads: LossGrads, cfg: RenderConfig | None = None) -> SurfelGrads:
    """Gradients of the loss with respect to every surfel parameter."""
    out = SurfelGrads.zeros(len(smap))
    view, results = _replay(smap, pose, K, render, grads, cfg, radial=True)
    if not results:
        return out
    M = len(view)
    acc = _TileGrads(*(np.zeros((M, 3)) for _ in range(4)), np.zeros((M, 2)), np.zeros(M), np.zeros((M, 3)))
    for cand, tg in results:
        for name in ("pc", "tu", "tv", "nc", "log_s", "alpha", "color"):
            np.add.at(getattr(acc, name), cand, getattr(tg, name))

    ids = view.ids
    R = pose.R
    grad_rot = np.stack([acc.tu @ R, acc.tv @ R, acc.nc @ R], axis=2)
    alpha = view.alpha
    out.p[ids] = acc.pc @ R
    out.q[ids] = quat_matrix_backward(smap.q[ids], grad_rot)
    out.log_s[ids] = acc.log_s
    out.logit_alpha[ids] = acc.alpha * alpha * (1.0 - alpha)
    out.color[ids] = acc.color
    return out


def backward_pose(smap: SurfelMap, pose: Pose, K: Intrinsics, render: RenderOutput,
                  grads: LossGrads, cfg: RenderConfig | None = None, radial_enabled=True) -> PoseGrad:
    """Gradient with respect to a left-multiplied twist (rho, phi) at `pose`.

    With `radial_enabled=False` the hit depth is differentiated as if it moved
    with the surfel center only; the offset from the center to the hit point
    is held fixed. Weight and footprint paths are unaffected.
    """
    view, results = _replay(smap, pose, K, render, grads, cfg, radial=radial_enabled)
    g = np.zeros(6)
    for cand, tg in results:
        g[:3] += tg.pc.sum(0)
        g[3:] += (
            np.cross(view.pc[cand], tg.pc)
            + np.cross(view.tu[cand], tg.tu)
            + np.cross(view.tv[cand], tg.tv)
            + np.cross(view.nc[cand], tg.nc)
        ).sum(0)
    logger.debug("pose gradient {} (radial={})", np.array2string(g, precision=4), radial_enabled)
    return PoseGrad(g)
