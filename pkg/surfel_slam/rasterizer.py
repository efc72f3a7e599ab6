"""Forward surfel splatting.

Surfels are sorted once per image by camera-frame center depth. The image
is cut into square tiles; each tile gathers the surfels whose projected
footprint overlaps it and evaluates every (pixel, surfel) pair as dense
arrays, front to back. Tiles are independent, so they can be processed by a
thread pool; results are stitched back in fixed tile order.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import imageio.v3 as iio
import numpy as np
from loguru import logger

from .core_geometry import Intrinsics, Pose
from .errors import DataError, GeometryError
from .surfel_map import Surfel, SurfelMap

PARALLEL_EPS = 1e-9


class DepthMode(str, Enum):
    MEAN = "mean"
    MEDIAN = "median"
    ADAPTIVE = "adaptive"


@dataclass
class RenderConfig:
    tau: float = 5e-6
    depth_mode: DepthMode = DepthMode.ADAPTIVE
    gauss_cutoff: float = 9.0
    t_min: float = 1e-4
    alpha_min: float = 1.0 / 255.0
    near: float = 0.01
    valid_threshold: float = 0.05
    tile_size: int = 16
    threads: int = 1

    def __post_init__(self):
        self.depth_mode = DepthMode(self.depth_mode)
        if self.tau <= 0 or self.gauss_cutoff <= 0:
            raise GeometryError("tau and gauss_cutoff must be positive")
        if not 0 < self.t_min < 1:
            raise GeometryError("t_min must lie in (0, 1)")
        if self.tile_size < 1:
            raise GeometryError("tile_size must be >= 1")

    @property
    def workers(self):
        return self.threads if self.threads > 0 else (os.cpu_count() or 1)


@dataclass
class Intersection:
    surfel_id: int
    u: float
    v: float
    z: float
    G: float
    weight: float = 0.0


@dataclass
class RenderOutput:
    color: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    distortion: np.ndarray
    transmittance: np.ndarray
    alpha_sum: np.ndarray
    dominant_id: np.ndarray
    dominant_depth: np.ndarray
    dominant_normal: np.ndarray
    valid: np.ndarray
    # pixels whose depth/normal were replaced by the dominant surfel
    selected: np.ndarray
    depth_mode: DepthMode

    @classmethod
    def background(cls, K: Intrinsics, depth_mode=DepthMode.ADAPTIVE) -> "RenderOutput":
        H, W = K.shape
        return cls(
            color=np.zeros((H, W, 3)),
            depth=np.zeros((H, W)),
            normal=np.zeros((H, W, 3)),
            distortion=np.zeros((H, W)),
            transmittance=np.ones((H, W)),
            alpha_sum=np.zeros((H, W)),
            dominant_id=np.full((H, W), -1, dtype=np.int64),
            dominant_depth=np.zeros((H, W)),
            dominant_normal=np.zeros((H, W, 3)),
            valid=np.zeros((H, W), dtype=bool),
            selected=np.zeros((H, W), dtype=bool),
            depth_mode=DepthMode(depth_mode),
        )


@dataclass
class SurfelView:
    """Camera-frame quantities of the visible surfels, sorted front to back."""

    ids: np.ndarray
    pc: np.ndarray
    tu: np.ndarray
    tv: np.ndarray
    nc: np.ndarray
    sign: np.ndarray
    su: np.ndarray
    sv: np.ndarray
    alpha: np.ndarray
    color: np.ndarray
    bbox: np.ndarray

    def __len__(self):
        return len(self.ids)


def prepare_view(smap: SurfelMap, pose: Pose, K: Intrinsics, cfg: RenderConfig) -> SurfelView:
    n = len(smap)
    if n == 0:
        empty3 = np.zeros((0, 3))
        return SurfelView(np.zeros(0, dtype=np.int64), empty3, empty3, empty3, empty3,
                          np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0), empty3,
                          np.zeros((0, 4), dtype=np.int64))
    rot = smap.rotation
    pc = pose.transform(smap.p)
    tu = rot[:, :, 0] @ pose.R.T
    tv = rot[:, :, 1] @ pose.R.T
    nc = rot[:, :, 2] @ pose.R.T
    scale = smap.scale
    su, sv = scale[:, 0], scale[:, 1]

    # footprint of the (u, v) square that bounds the cutoff disk
    rho = np.sqrt(cfg.gauss_cutoff)
    signs = np.array([[1, 1], [1, -1], [-1, 1], [-1, -1]], dtype=float)
    corners = (
        pc[:, None, :]
        + rho * signs[None, :, 0, None] * (su[:, None] * tu)[:, None, :]
        + rho * signs[None, :, 1, None] * (sv[:, None] * tv)[:, None, :]
    )
    front = corners[..., 2] > cfg.near
    keep = front.any(axis=1)
    all_front = front.all(axis=1)
    safe = np.where(all_front[:, None, None], corners, np.array([0.0, 0.0, 1.0]))
    proj = K.project(safe)
    x0 = np.where(all_front, np.floor(proj[..., 0].min(1)), 0)
    x1 = np.where(all_front, np.ceil(proj[..., 0].max(1)), K.width - 1)
    y0 = np.where(all_front, np.floor(proj[..., 1].min(1)), 0)
    y1 = np.where(all_front, np.ceil(proj[..., 1].max(1)), K.height - 1)
    keep &= (x0 <= K.width - 1) & (x1 >= 0) & (y0 <= K.height - 1) & (y1 >= 0)
    bbox = np.stack([x0, x1, y0, y1], axis=1)
    bbox = np.clip(bbox, 0, [K.width - 1, K.width - 1, K.height - 1, K.height - 1]).astype(np.int64)

    ids = np.nonzero(keep)[0]
    ids = ids[np.argsort(pc[ids, 2], kind="stable")]
    sign = np.where((nc[ids] * pc[ids]).sum(1) > 0, -1.0, 1.0)
    return SurfelView(
        ids=ids, pc=pc[ids], tu=tu[ids], tv=tv[ids], nc=nc[ids], sign=sign,
        su=su[ids], sv=sv[ids], alpha=smap.alpha[ids], color=smap.color[ids], bbox=bbox[ids],
    )


def tile_layout(K: Intrinsics, tile_size: int):
    """Tiles as (r0, r1, c0, c1) in row-major order."""
    return [
        (r0, min(r0 + tile_size, K.height), c0, min(c0 + tile_size, K.width))
        for r0 in range(0, K.height, tile_size)
        for c0 in range(0, K.width, tile_size)
    ]


def tile_candidates(view: SurfelView, tile):
    r0, r1, c0, c1 = tile
    b = view.bbox
    mask = (b[:, 0] <= c1 - 1) & (b[:, 1] >= c0) & (b[:, 2] <= r1 - 1) & (b[:, 3] >= r0)
    return np.nonzero(mask)[0]


class TileState:
    """Every per-pair quantity of one tile's front-to-back traversal.

    Arrays indexed [pixel, candidate] have shape (P, K); candidates are
    positions in the `SurfelView`, already in depth order.
    """

    def __init__(self, view: SurfelView, rays, cand, cfg: RenderConfig):
        self.cand = cand
        self.rays = rays
        P, K = len(rays), len(cand)
        self.n = view.nc[cand]
        self.pc = view.pc[cand]
        self.tu = view.tu[cand]
        self.tv = view.tv[cand]
        self.su = view.su[cand]
        self.sv = view.sv[cand]
        self.alpha = view.alpha[cand]
        self.color = view.color[cand]
        self.sign = view.sign[cand]
        self.n_render = self.n * self.sign[:, None]

        b = rays @ self.n.T
        ok_b = np.abs(b) >= PARALLEL_EPS
        self.b = np.where(ok_b, b, 1.0)
        num = (self.n * self.pc).sum(1)
        lam = num[None, :] / self.b
        r = lam[..., None] * rays[:, None, :] - self.pc[None, :, :]
        u = (r * self.tu[None]).sum(-1) / self.su[None]
        v = (r * self.tv[None]).sum(-1) / self.sv[None]
        q2 = u * u + v * v
        hit = ok_b & (lam > cfg.near) & (q2 <= cfg.gauss_cutoff)
        G = np.where(hit, np.exp(-0.5 * np.where(hit, q2, 0.0)), 0.0)
        a = self.alpha[None] * G
        active = hit & (a >= cfg.alpha_min)
        a = np.where(active, a, 0.0)

        T = _exclusive_cumprod(1.0 - a)
        contrib = active & (T >= cfg.t_min)
        a = np.where(contrib, a, 0.0)
        T = _exclusive_cumprod(1.0 - a)

        self.hit = hit
        self.contrib = contrib
        self.r = np.where(hit[..., None], r, 0.0)
        self.u = np.where(hit, u, 0.0)
        self.v = np.where(hit, v, 0.0)
        self.z = np.where(contrib, lam, 0.0)
        self.G = G
        self.a = a
        self.T = T
        self.w = a * T
        self.T_final = T[:, -1] * (1.0 - a[:, -1]) if K else np.ones(P)

        w = self.w
        self.W = w.sum(1)
        self.has = self.W > 0
        self.mean_depth = np.where(self.has, (w * self.z).sum(1) / np.where(self.has, self.W, 1.0), 0.0)
        self.blend_color = w @ self.color
        self.blend_normal = w @ self.n_render
        self.distortion = streaming_distortion_rows(w, self.z)

        rows = np.arange(P)
        if K:
            self.k_dom = np.argmax(w, axis=1)
            exceed = np.cumsum(w, axis=1) > 0.5
            last = K - 1 - np.argmax(contrib[:, ::-1], axis=1)
            self.k_med = np.where(exceed.any(1), np.argmax(exceed, axis=1), last)
        else:
            self.k_dom = np.zeros(P, dtype=np.int64)
            self.k_med = np.zeros(P, dtype=np.int64)
        self.dom_depth = np.where(self.has, self.z[rows, self.k_dom] if K else 0.0, 0.0)
        self.dom_normal = np.where(self.has[:, None], self.n_render[self.k_dom] if K else 0.0, 0.0)
        self.median_depth = np.where(self.has, self.z[rows, self.k_med] if K else 0.0, 0.0)

    def select(self, cfg: RenderConfig):
        """Adaptive substitution mask for this tile's pixels."""
        if cfg.depth_mode is not DepthMode.ADAPTIVE:
            return np.zeros(len(self.rays), dtype=bool)
        return adaptive_mask(self.distortion, self.mean_depth, self.dom_depth, self.has, cfg.tau)

    def outputs(self, selected, cfg: RenderConfig):
        """(depth, normal, depth_index, normal_index); index -1 means blended."""
        none = np.full(len(self.rays), -1, dtype=np.int64)
        if cfg.depth_mode is DepthMode.MEAN:
            return self.mean_depth, self.blend_normal, none, none
        if cfg.depth_mode is DepthMode.MEDIAN:
            return self.median_depth, self.blend_normal, np.where(self.has, self.k_med, -1), none
        depth, normal = adaptive_substitute(
            self.mean_depth, self.blend_normal, self.dom_depth, self.dom_normal, selected
        )
        index = np.where(selected, self.k_dom, -1)
        return depth, normal, index, index


def _exclusive_cumprod(x):
    out = np.ones_like(x)
    if x.shape[1] > 1:
        out[:, 1:] = np.cumprod(x[:, :-1], axis=1)
    return out


def streaming_distortion_rows(w, z):
    """Row-wise sum_{i,j} w_i w_j |z_i - z_j| in one pass over depth-sorted entries."""
    if w.shape[1] == 0:
        return np.zeros(w.shape[0])
    order = np.argsort(z, axis=1, kind="stable")
    ws = np.take_along_axis(w, order, axis=1)
    zs = np.take_along_axis(z, order, axis=1)
    wz = ws * zs
    w_before = np.cumsum(ws, axis=1) - ws
    wz_before = np.cumsum(wz, axis=1) - wz
    return 2.0 * (ws * (zs * w_before - wz_before)).sum(axis=1)


def distortion_term(intersections) -> float:
    """Depth distortion of one pixel's intersection list (ordered double sum)."""
    if len(intersections) == 0:
        return 0.0
    w = np.array([[i.weight for i in intersections]], dtype=float)
    z = np.array([[i.z for i in intersections]], dtype=float)
    return float(streaming_distortion_rows(w, z)[0])


def adaptive_mask(distortion, mean_depth, dom_depth, has, tau):
    return has & (distortion > tau) & (mean_depth > dom_depth)


def adaptive_substitute(depth, normal, dom_depth, dom_normal, selected):
    """Replace blended depth/normal by the dominant surfel's where `selected`."""
    return (
        np.where(selected, dom_depth, depth),
        np.where(np.asarray(selected)[..., None], dom_normal, normal),
    )


def map_tiles(fn, tiles, workers):
    if workers <= 1 or len(tiles) <= 1:
        return [fn(tile) for tile in tiles]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tiles))


def render(smap: SurfelMap, pose: Pose, K: Intrinsics, cfg: RenderConfig | None = None) -> RenderOutput:
    """Render color, depth, normal and the auxiliary buffers of a surfel map."""
    cfg = cfg or RenderConfig()
    out = RenderOutput.background(K, cfg.depth_mode)
    view = prepare_view(smap, pose, K, cfg)
    if len(view) == 0:
        return out
    rays = K.ray_grid()

    def run(tile):
        r0, r1, c0, c1 = tile
        cand = tile_candidates(view, tile)
        if len(cand) == 0:
            return None
        state = TileState(view, rays[r0:r1, c0:c1].reshape(-1, 3), cand, cfg)
        selected = state.select(cfg)
        depth, normal, _, _ = state.outputs(selected, cfg)
        dom_id = np.where(state.has, view.ids[cand][state.k_dom], -1)
        return tile, state, selected, depth, normal, dom_id

    results = map_tiles(run, tile_layout(K, cfg.tile_size), cfg.workers)
    for result in results:
        if result is None:
            continue
        (r0, r1, c0, c1), state, selected, depth, normal, dom_id = result
        shape = (r1 - r0, c1 - c0)
        out.color[r0:r1, c0:c1] = state.blend_color.reshape(shape + (3,))
        out.depth[r0:r1, c0:c1] = depth.reshape(shape)
        out.normal[r0:r1, c0:c1] = normal.reshape(shape + (3,))
        out.distortion[r0:r1, c0:c1] = state.distortion.reshape(shape)
        out.transmittance[r0:r1, c0:c1] = state.T_final.reshape(shape)
        out.alpha_sum[r0:r1, c0:c1] = state.W.reshape(shape)
        out.dominant_id[r0:r1, c0:c1] = dom_id.reshape(shape)
        out.dominant_depth[r0:r1, c0:c1] = state.dom_depth.reshape(shape)
        out.dominant_normal[r0:r1, c0:c1] = state.dom_normal.reshape(shape + (3,))
        out.selected[r0:r1, c0:c1] = selected.reshape(shape)
    out.valid = out.alpha_sum > cfg.valid_threshold
    logger.debug("rendered {} of {} surfels, {} valid pixels", len(view), len(smap), int(out.valid.sum()))
    return out


def intersect(surfel: Surfel, ray, pose: Pose, cfg: RenderConfig | None = None, surfel_id=-1):
    """Ray-surfel intersection in the camera frame; None on a miss."""
    cfg = cfg or RenderConfig()
    ray = np.asarray(ray, dtype=float)
    rot = pose.R @ surfel.rotation
    tu, tv, n = rot[:, 0], rot[:, 1], rot[:, 2]
    pc = pose.transform(surfel.p)
    b = float(n @ ray)
    if abs(b) < PARALLEL_EPS:
        return None
    z = float(n @ pc) / b
    if z <= cfg.near:
        return None
    r = z * ray - pc
    su, sv = surfel.scale
    u, v = float(tu @ r) / su, float(tv @ r) / sv
    if u * u + v * v > cfg.gauss_cutoff:
        return None
    return Intersection(surfel_id, u, v, z, float(np.exp(-0.5 * (u * u + v * v))))


def trace_pixel(smap: SurfelMap, pose: Pose, K: Intrinsics, pixel, cfg: RenderConfig | None = None):
    """Front-to-back traversal of a single pixel ray; returns contributing intersections."""
    cfg = cfg or RenderConfig()
    col, row = pixel
    ray = np.array([(col - K.cx) / K.fx, (row - K.cy) / K.fy, 1.0])
    depth_order = np.argsort(pose.transform(smap.p)[:, 2], kind="stable") if len(smap) else []
    hits = []
    T = 1.0
    for k in depth_order:
        hit = intersect(smap.surfel(k), ray, pose, cfg, surfel_id=int(k))
        if hit is None:
            continue
        a = smap.alpha[k] * hit.G
        if a < cfg.alpha_min:
            continue
        if T < cfg.t_min:
            break
        hit.weight = a * T
        hits.append(hit)
        T *= 1.0 - a
    return hits


def dump_debug_images(out: RenderOutput, directory, prefix="render"):
    """Write PPM (color, normal) and PGM (depth, distortion, transmittance) images."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    def to_u8(x, scale):
        return np.clip(np.nan_to_num(x) * scale * 255.0 + 0.5, 0, 255).astype(np.uint8)

    norm = np.linalg.norm(out.normal, axis=-1, keepdims=True)
    unit = np.where(norm > 0, out.normal / np.where(norm > 0, norm, 1.0), 0.0)
    images = {
        "color.ppm": to_u8(out.color, 1.0),
        "normal.ppm": np.where(norm > 0, to_u8(0.5 * (unit + 1.0), 1.0), 0).astype(np.uint8),
        "depth.pgm": to_u8(out.depth, 1.0 / max(out.depth.max(), 1e-12)),
        "distortion.pgm": to_u8(out.distortion, 1.0 / max(out.distortion.max(), 1e-12)),
        "transmittance.pgm": to_u8(out.transmittance, 1.0),
    }
    written = []
    for name, image in images.items():
        path = directory / f"{prefix}_{name}"
        try:
            iio.imwrite(path, image)
        except OSError as exc:
            raise DataError(f"cannot write {path}: {exc}") from exc
        written.append(path)
    return written
