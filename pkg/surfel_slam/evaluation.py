"""Trajectory and reconstruction metrics, and the convergence-basin harness."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from loguru import logger
from scipy.spatial import cKDTree

from .core_geometry import Intrinsics, look_at
from .errors import DataError, GeometryError, TrackingError
from .io_datasets import PointSet, associate
from .mapping import MappingConfig, optimize_window
from .rasterizer import RenderConfig, render
from .surfel_map import ManagementConfig, SurfelMap, complete_tangents, densify, prune
from .synthetic import SyntheticScene, grid_poses, render_synthetic
from .tracking import TrackingConfig, track_frame

GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


@dataclass
class AteResult:
    rmse: float
    mean: float
    median: float
    max: float
    scale: float
    rotation: np.ndarray
    translation: np.ndarray
    pairs: int

    def as_row(self):
        return {"ate_rmse": self.rmse, "ate_mean": self.mean, "ate_median": self.median,
                "ate_max": self.max, "ate_pairs": self.pairs}


def align_umeyama(model, data, with_scale=False):
    """s, R, t minimizing || model - (s R data + t) ||^2 over (N, 3) point lists."""
    mu_m = model.mean(0)
    mu_d = data.mean(0)
    m0 = model - mu_m
    d0 = data - mu_d
    n = len(model)
    C = m0.T @ d0 / n
    sigma2 = (d0**2).sum() / n
    U, D, Vt = np.linalg.svd(C)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / sigma2) if with_scale and sigma2 > 0 else 1.0
    t = mu_m - s * R @ mu_d
    return s, R, t


def ate_positions(est, gt, mode="rigid") -> AteResult:
    est = np.asarray(est, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if len(est) != len(gt) or len(est) < 3:
        raise DataError(f"ATE needs at least 3 associated poses, got {min(len(est), len(gt))}")
    if mode not in ("rigid", "similarity"):
        raise GeometryError(f"unknown alignment mode '{mode}'")
    s, R, t = align_umeyama(gt, est, with_scale=mode == "similarity")
    errors = np.linalg.norm(gt - (s * est @ R.T + t), axis=1)
    return AteResult(
        rmse=float(np.sqrt((errors**2).mean())),
        mean=float(errors.mean()),
        median=float(np.median(errors)),
        max=float(errors.max()),
        scale=s,
        rotation=R,
        translation=t,
        pairs=len(errors),
    )


def ate(est, gt, mode="rigid", max_difference=0.02) -> AteResult:
    """Absolute trajectory error of (timestamp, T_CW) lists after closed-form alignment."""
    est_by_t = dict(est)
    gt_by_t = dict(gt)
    matches = associate(est_by_t, gt_by_t, max_difference)
    est_xyz = [est_by_t[a].center for a, _ in matches]
    gt_xyz = [gt_by_t[b].center for _, b in matches]
    return ate_positions(est_xyz, gt_xyz, mode)


class GridIndex:
    """Uniform voxel grid over a point set answering exact nearest-neighbor queries.

    Queries search cubic shells of cells around their own cell and stop once
    the best distance found cannot be beaten by any unvisited cell. Queries
    still open after `max_shell` shells are answered by a k-d tree.
    """

    # cell lookups per vectorized batch
    BATCH_CELLS = 1 << 20

    def __init__(self, points, cell=None, max_shell=4):
        self.points = np.asarray(points, dtype=float)
        if len(self.points) == 0:
            raise DataError("cannot index an empty point set")
        lo = self.points.min(0)
        hi = self.points.max(0)
        if cell is None:
            volume = float(np.prod(np.maximum(hi - lo, 1e-3)))
            cell = 2.0 * (volume / len(self.points)) ** (1.0 / 3.0)
        self.cell = max(float(cell), 1e-9)
        self.max_shell = max(int(max_shell), 0)
        self.origin = lo
        keys = np.floor((self.points - lo) / self.cell).astype(np.int64)
        self.dims = keys.max(0) + 1
        ids = self._linear(keys)
        order = np.argsort(ids, kind="stable")
        self.order = order
        self.sorted_points = self.points[order]
        self.cell_ids, self.cell_start, self.cell_count = np.unique(
            ids[order], return_index=True, return_counts=True
        )
        self._tree = None

    def _linear(self, keys):
        return (keys[..., 0] * self.dims[1] + keys[..., 1]) * self.dims[2] + keys[..., 2]

    @staticmethod
    def _shell(r):
        if r == 0:
            return np.zeros((1, 3), dtype=np.int64)
        span = np.arange(-r, r + 1)
        cube = np.stack(np.meshgrid(span, span, span, indexing="ij"), axis=-1).reshape(-1, 3)
        return cube[np.abs(cube).max(1) == r]

    def _visit(self, queries, qkeys, active, shell, best_d, best_i):
        """Update the best match of `active` queries with the points of their shell cells."""
        nk = qkeys[active, None, :] + shell[None]
        inside = np.all((nk >= 0) & (nk < self.dims), axis=-1)
        cid = np.where(inside, self._linear(np.where(inside[..., None], nk, 0)), -1)
        pos = np.clip(np.searchsorted(self.cell_ids, cid), 0, len(self.cell_ids) - 1)
        found = inside & (self.cell_ids[pos] == cid)
        qa, sa = np.nonzero(found)
        if not len(qa):
            return
        starts = self.cell_start[pos[qa, sa]]
        counts = self.cell_count[pos[qa, sa]]
        owner = np.repeat(qa, counts)
        offsets = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        pidx = np.repeat(starts, counts) + offsets
        d = np.linalg.norm(queries[active[owner]] - self.sorted_points[pidx], axis=1)
        order = np.lexsort((pidx, d, owner))
        first = order[np.r_[True, owner[order][1:] != owner[order][:-1]]]
        q = active[owner[first]]
        better = d[first] < best_d[q]
        best_d[q[better]] = d[first][better]
        best_i[q[better]] = self.order[pidx[first][better]]

    def query(self, queries):
        """Distances and indices of the nearest indexed point for each query."""
        queries = np.asarray(queries, dtype=float)
        Q = len(queries)
        best_d = np.full(Q, np.inf)
        best_i = np.full(Q, -1, dtype=np.int64)
        qkeys = np.floor((queries - self.origin) / self.cell).astype(np.int64)
        # beyond this shell every cell of the grid has been visited
        limit = np.maximum(np.abs(qkeys), np.abs(qkeys - (self.dims - 1))).max(1)
        active = np.arange(Q)
        r = 0
        while len(active) and r <= self.max_shell:
            shell = self._shell(r)
            batch = max(1, self.BATCH_CELLS // len(shell))
            for start in range(0, len(active), batch):
                self._visit(queries, qkeys, active[start:start + batch], shell, best_d, best_i)
            done = (best_d[active] <= r * self.cell) | (r >= limit[active])
            active = active[~done]
            r += 1
        if len(active):
            if self._tree is None:
                self._tree = cKDTree(self.points)
            _, idx = self._tree.query(queries[active])
            best_i[active] = idx
            best_d[active] = np.linalg.norm(queries[active] - self.points[idx], axis=1)
            logger.debug("grid index: {} of {} queries answered by the k-d tree", len(active), Q)
        return best_d, best_i


@dataclass
class GeomResult:
    accuracy: float
    completion: float
    precision: float
    recall: float
    f1: float

    def as_row(self):
        return {"accuracy_cm": self.accuracy, "completion_cm": self.completion,
                "precision": self.precision, "recall": self.recall, "f1": self.f1}


def _as_points(cloud):
    pts = cloud.points if isinstance(cloud, PointSet) else np.asarray(cloud, dtype=float)
    if len(pts) == 0:
        raise DataError("point-cloud metrics need non-empty point sets")
    return pts


def geom_metrics(pred, gt, thresh=0.03) -> GeomResult:
    """Accuracy/completion in cm, precision/recall/F1 in percent at `thresh` meters."""
    pred, gt = _as_points(pred), _as_points(gt)
    d_pred, _ = GridIndex(gt).query(pred)
    d_gt, _ = GridIndex(pred).query(gt)
    precision = float((d_pred < thresh).mean() * 100.0)
    recall = float((d_gt < thresh).mean() * 100.0)
    f1 = 2.0 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return GeomResult(float(d_pred.mean() * 100.0), float(d_gt.mean() * 100.0), precision, recall, f1)


def psnr(rendered, target, peak=1.0):
    mse = float(np.mean((np.asarray(rendered) - np.asarray(target)) ** 2))
    return np.inf if mse == 0 else 10.0 * np.log10(peak**2 / mse)


def keyframe_metrics(smap: SurfelMap, keyframes, K: Intrinsics, render_cfg: RenderConfig | None = None):
    """Mean depth L1 (meters) and color PSNR over keyframes rendered at their poses."""
    l1, psnrs = [], []
    for kf in keyframes:
        out = render(smap, kf.pose, K, render_cfg)
        mask = out.valid & (kf.frame.depth > 0)
        if mask.any():
            l1.append(float(np.abs(out.depth - kf.frame.depth)[mask].mean()))
        psnrs.append(psnr(out.color, kf.frame.color))
    return {
        "depth_l1": float(np.mean(l1)) if l1 else float("nan"),
        "psnr": float(np.mean(psnrs)) if psnrs else float("nan"),
    }


@dataclass
class BasinConfig:
    grid_spacing: float = 0.1
    radii: list = field(default_factory=lambda: [0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4, 1.6])
    steps: int = 1000
    success_radius: float = 0.01
    trials: int = 20
    train_iterations: int = 300
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        radii = np.asarray(self.radii, dtype=float)
        if np.any(radii < 0) or np.any(np.diff(radii) <= 0):
            raise GeometryError("basin radii must be non-negative and ascending")
        if self.steps < 0 or self.trials <= 0:
            raise GeometryError("basin steps must be >= 0 and trials > 0")


def hemisphere_directions(n, axis, angle=0.0):
    """Fibonacci-lattice unit vectors on the hemisphere around `axis`, spun by `angle`."""
    i = np.arange(n)
    z = 1.0 - (i + 0.5) / n
    rho = np.sqrt(1.0 - z * z)
    phi = i * GOLDEN_ANGLE + angle
    local = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    tu, tv = complete_tangents(axis[None])
    return local @ np.stack([tu[0], tv[0], axis])


def train_map(frames, poses, K: Intrinsics, iterations, render_cfg=None, mapping_cfg: MappingConfig | None = None,
              management_cfg: ManagementConfig | None = None) -> SurfelMap:
    """Map seeded from every frame at its known pose, optimized jointly, then pruned."""
    render_cfg = render_cfg or RenderConfig()
    mapping_cfg = mapping_cfg or MappingConfig()
    management_cfg = management_cfg or ManagementConfig()
    smap = SurfelMap()
    for frame, pose in zip(frames, poses):
        densify(smap, frame, render(smap, pose, K, render_cfg), pose, K, management_cfg)
    optimize_window(smap, frames, poses, K, mapping_cfg, render_cfg, iterations=iterations)
    prune(smap, management_cfg)
    return smap


def train_grid_map(scene: SyntheticScene, K: Intrinsics, cfg: BasinConfig, render_cfg=None,
                   mapping_cfg: MappingConfig | None = None, management_cfg: ManagementConfig | None = None):
    """Map trained from the 3x3 grid views only; returns (map, center pose, center frame)."""
    poses = grid_poses(cfg.grid_spacing, np.array([0.0, 0.0, 2.5]))
    frames = [render_synthetic(scene, pose, K) for pose in poses]
    smap = train_map(frames, poses, K, cfg.train_iterations, render_cfg, mapping_cfg, management_cfg)
    logger.info("basin map trained from {} grid views: {} surfels", len(frames), len(smap))
    return smap, poses[4], frames[4]


def basin_sweep(scene: SyntheticScene, K: Intrinsics, cfg: BasinConfig, variants=None,
                render_cfg: RenderConfig | None = None, tracking_cfg: TrackingConfig | None = None,
                trained=None) -> pd.DataFrame:
    """Success rate of pose optimization from trial poses at each radius, per tracker variant.

    `variants` maps a name to its `radial_enabled` flag. A trial succeeds when
    the optimized camera center lies within `success_radius` of the target.
    """
    variants = variants or {"radial": True, "no_radial": False}
    render_cfg = render_cfg or RenderConfig()
    tracking_cfg = tracking_cfg or TrackingConfig()
    smap, target_pose, target_frame = trained or train_grid_map(scene, K, cfg, render_cfg)
    centroid = scene.center
    eye = target_pose.center
    rng = np.random.default_rng(cfg.seed)

    def run_trial(args):
        radius, direction, radial = args
        init = look_at(eye + radius * direction, centroid) if radius > 0 else target_pose
        if cfg.steps == 0:
            pose = init
        else:
            tcfg = replace(tracking_cfg, iterations=cfg.steps, radial_enabled=radial)
            try:
                pose, _ = track_frame(smap, target_frame, init, K, tcfg, render_cfg)
            except TrackingError:
                return False
        return bool(np.linalg.norm(pose.center - eye) <= cfg.success_radius)

    rows = []
    for radius in cfg.radii:
        directions = hemisphere_directions(cfg.trials, eye - centroid, rng.uniform(0.0, 2.0 * np.pi))
        for name, radial in variants.items():
            jobs = [(radius, d, radial) for d in directions]
            if cfg.threads > 1:
                with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
                    results = list(pool.map(run_trial, jobs))
            else:
                results = [run_trial(job) for job in jobs]
            successes = int(sum(results))
            rows.append({"radius": radius, "variant": name, "trials": len(results),
                         "successes": successes, "success_rate": successes / len(results)})
            logger.info("basin r={:.2f} {}: {}/{}", radius, name, successes, len(results))
    return pd.DataFrame(rows)
