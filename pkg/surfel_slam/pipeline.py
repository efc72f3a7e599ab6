"""SLAM orchestration: tracking, keyframes, mapping windows and export."""
from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
import pandas as pd
from loguru import logger
from tqdm import tqdm

from .core_geometry import Intrinsics, Pose, backproject_map, rotation_angle
from .errors import GeometryError, SlamError, TrackingError
from .io_datasets import Frame, PointSet, voxel_downsample, write_ply, write_trajectory_tum
from .mapping import optimize_window
from .rasterizer import DepthMode, RenderConfig, render
from .surfel_map import SurfelMap, densify, prune, write_map_ply
from .tracking import track

if TYPE_CHECKING:
    from .config import SlamConfig


@dataclass
class KeyframeConfig:
    rotation_threshold: float = 0.35
    translation_threshold: float = 0.3

    def __post_init__(self):
        if self.rotation_threshold <= 0 or self.translation_threshold <= 0:
            raise GeometryError("keyframe thresholds must be positive")


@dataclass
class Keyframe:
    frame_id: int
    frame: Frame
    pose: Pose


@dataclass
class SlamState:
    K: Intrinsics
    smap: SurfelMap = field(default_factory=SurfelMap)
    keyframes: list = field(default_factory=list)
    trajectory: list = field(default_factory=list)
    frame_count: int = 0
    recent: deque = field(default_factory=deque)
    mapping_traces: list = field(default_factory=list)
    tracking_traces: list = field(default_factory=list)
    windows: int = 0
    tracking_seconds: float = 0.0
    mapping_seconds: float = 0.0
    refine_seconds: float = 0.0

    @property
    def poses(self):
        return [pose for _, pose in self.trajectory]

    def mapping_trace(self) -> pd.DataFrame:
        return pd.concat(self.mapping_traces, ignore_index=True) if self.mapping_traces else pd.DataFrame()

    def tracking_trace(self) -> pd.DataFrame:
        return pd.concat(self.tracking_traces, ignore_index=True) if self.tracking_traces else pd.DataFrame()

    def runtime_row(self) -> dict:
        """Wall-clock throughput of the online loop; final refinement is reported apart."""
        tracked = max(len(self.trajectory) - 1, 0)
        online = self.tracking_seconds + self.mapping_seconds
        return {
            "tracking_s_per_frame": self.tracking_seconds / tracked if tracked else 0.0,
            "mapping_s_per_frame": self.mapping_seconds / max(len(self.trajectory), 1),
            "fps": len(self.trajectory) / online if online > 0 else 0.0,
            "refine_s": self.refine_seconds,
        }


def is_keyframe(pose: Pose, last: Pose, cfg: KeyframeConfig) -> bool:
    rotation = rotation_angle(pose.R @ last.R.T)
    translation = float(np.linalg.norm(pose.center - last.center))
    return rotation > cfg.rotation_threshold or translation > cfg.translation_threshold


def run_window(state: SlamState, entries, cfg: "SlamConfig", kind: str, iterations=None):
    """One mapping window over (frame_id, frame, pose) entries, then densify and prune."""
    started = time.perf_counter()
    frame_ids = [e[0] for e in entries]
    trace = optimize_window(
        state.smap, [e[1] for e in entries], [e[2] for e in entries], state.K,
        cfg.mapping, cfg.render, iterations=iterations, frame_ids=frame_ids,
    )
    if not trace.empty:
        state.mapping_traces.append(trace.assign(window=state.windows, kind=kind))
    _, newest, pose = entries[-1]
    out = render(state.smap, pose, state.K, cfg.render)
    added = densify(state.smap, newest, out, pose, state.K, cfg.management)
    removed = prune(state.smap, cfg.management)
    state.mapping_seconds += time.perf_counter() - started
    logger.info("window {} ({}, {} frames): +{} / -{} surfels, map size {}",
                state.windows, kind, len(entries), added, removed, len(state.smap))
    state.windows += 1


def process_frame(state: SlamState, frame: Frame, cfg: "SlamConfig") -> SlamState:
    """Track, decide on a keyframe, and run the mapping windows that fall due."""
    fid = state.frame_count
    if state.recent.maxlen != cfg.mapping.map_every:
        state.recent = deque(state.recent, maxlen=cfg.mapping.map_every)

    if fid == 0:
        pose = Pose.identity()
        state.trajectory.append((frame.timestamp, pose))
        state.keyframes.append(Keyframe(fid, frame, pose))
        state.recent.append((fid, frame))
        seeded = densify(state.smap, frame, render(state.smap, pose, state.K, cfg.render), pose,
                         state.K, cfg.management)
        logger.info("frame 0: seeded {} surfels", seeded)
        run_window(state, [(fid, frame, pose)], cfg, "bootstrap")
        state.frame_count += 1
        return state

    init_pose = state.trajectory[-1][1]
    started = time.perf_counter()
    try:
        pose, trace = track(state.smap, frame, init_pose, state.K, cfg.tracking, cfg.render)
    except TrackingError as exc:
        raise TrackingError(f"frame {fid}: {exc}") from exc
    state.tracking_seconds += time.perf_counter() - started
    if not trace.empty:
        state.tracking_traces.append(trace.assign(frame_id=fid))
    state.trajectory.append((frame.timestamp, pose))
    state.recent.append((fid, frame))

    if is_keyframe(pose, state.keyframes[-1].pose, cfg.keyframe):
        state.keyframes.append(Keyframe(fid, frame, pose))
        logger.info("frame {}: keyframe #{}", fid, len(state.keyframes))
        run_window(state, [(k.frame_id, k.frame, k.pose) for k in state.keyframes], cfg, "keyframe")
    elif fid % cfg.mapping.map_every == 0:
        poses = state.poses
        run_window(state, [(i, f, poses[i]) for i, f in state.recent], cfg, "regular")
    state.frame_count += 1
    return state


def run_sequence(frames, K: Intrinsics, cfg: "SlamConfig", total=None, progress=False) -> SlamState:
    state = SlamState(K)
    for frame in tqdm(frames, total=total, disable=not progress, desc="frames", unit="frame"):
        process_frame(state, frame, cfg)
    return state


def finalize(state: SlamState, cfg: "SlamConfig", out_dir=None) -> SlamState:
    """Refine over all keyframes with the final multiplier, then optionally export."""
    if not state.keyframes:
        raise SlamError("finalize needs at least one keyframe")
    iterations = cfg.mapping.final_refine_multiplier * cfg.mapping.iterations_per_window
    if iterations > 0:
        started = time.perf_counter()
        entries = [(k.frame_id, k.frame, k.pose) for k in state.keyframes]
        trace = optimize_window(state.smap, [e[1] for e in entries], [e[2] for e in entries], state.K,
                                cfg.mapping, cfg.render, iterations=iterations, frame_ids=[e[0] for e in entries])
        state.mapping_traces.append(trace.assign(window=state.windows, kind="final"))
        state.refine_seconds += time.perf_counter() - started
        state.windows += 1
        logger.info("final refinement: {} iterations over {} keyframes", iterations, len(entries))
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_trajectory_tum(state.trajectory, out_dir / "trajectory.txt")
        write_map_ply(state.smap, out_dir / "map.ply")
    return state


def export_pointcloud(state: SlamState, stride=4, cfg: "SlamConfig | None" = None, voxel=0.01) -> PointSet:
    """Adaptive-mode keyframe depths back-projected to world points, deduplicated per voxel."""
    if not state.keyframes:
        logger.warning("no keyframes; exporting an empty point cloud")
        return PointSet()
    render_cfg = replace(cfg.render if cfg else RenderConfig(), depth_mode=DepthMode.ADAPTIVE)
    points, normals, colors = [], [], []
    for kf in state.keyframes:
        out = render(state.smap, kf.pose, state.K, render_cfg)
        ok = (out.valid & (out.depth > 0))[::stride, ::stride]
        cam = backproject_map(out.depth, state.K)[::stride, ::stride][ok]
        n = out.normal[::stride, ::stride][ok]
        n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
        inv = kf.pose.inverse()
        points.append(inv.transform(cam))
        normals.append(inv.rotate(n))
        colors.append(out.color[::stride, ::stride][ok])
    cloud = PointSet(np.concatenate(points), np.concatenate(normals), np.concatenate(colors))
    return voxel_downsample(cloud, voxel)


def export_results(state: SlamState, out_dir, cfg: "SlamConfig") -> PointSet:
    """Write pointcloud.ply and the loss traces; returns the exported cloud."""
    out_dir = Path(out_dir)
    cloud = export_pointcloud(state, cfg.export_stride, cfg)
    write_ply(cloud, out_dir / "pointcloud.ply")
    for name, table in (("mapping_trace.csv", state.mapping_trace()), ("tracking_trace.csv", state.tracking_trace())):
        if not table.empty:
            table.to_csv(out_dir / name, index=False)
    return cloud
