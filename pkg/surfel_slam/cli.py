"""Command-line entry points.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 tracking failure.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd
from loguru import logger

from .config import SlamConfig, load_config, write_config
from .core_geometry import Pose
from .errors import DataError, SlamError
from .evaluation import ate, basin_sweep, geom_metrics, keyframe_metrics
from .io_datasets import load_tum, read_ply, read_trajectory_tum, write_trajectory_tum
from .pipeline import export_results, finalize, run_sequence
from .rasterizer import dump_debug_images, render
from .surfel_map import read_map_ply
from .synthetic import FIXTURES, sample_surface, synthetic_fixture, write_tum_sequence

SYNTHETIC_PREFIX = "synthetic:"
LOG_FORMAT = "<green>{time:HH:mm:ss}</green> | <level>{level: <7}</level> | {message}"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def configure_logging(verbose=False, log_file=None):
    logger.remove()
    logger.add(sys.stderr, level="DEBUG" if verbose else "INFO", format=LOG_FORMAT)
    if log_file is not None:
        logger.add(str(log_file), level="DEBUG", mode="w")


def _add_config_flags(p):
    p.add_argument("--config", type=Path, help="YAML configuration file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.FIELD=VALUE",
                   help="override a single configuration value (repeatable)")
    p.add_argument("--threads", type=int, help="worker threads (0 = all cores)")


def build_parser():
    parser = _Parser(prog="surfel-slam", description="Surfel-splatting RGB-D SLAM")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="run SLAM on a TUM directory or a synthetic fixture")
    p.add_argument("--dataset", required=True, help="TUM directory or synthetic:<name>")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--tracker", choices=["coupled", "icp"])
    p.add_argument("--depth-mode", choices=["mean", "median", "adaptive"])
    p.add_argument("--no-radial", action="store_true", help="drop the radial term from pose gradients")
    p.add_argument("--frames", type=int, help="process only the first N frames")
    p.add_argument("--noise", type=float, default=0.0, help="synthetic depth noise sigma (meters)")
    _add_config_flags(p)

    p = sub.add_parser("eval-ate", help="absolute trajectory error of two TUM trajectories")
    p.add_argument("--est", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--mode", choices=["rigid", "similarity"], default="rigid")
    p.add_argument("--csv", type=Path)

    p = sub.add_parser("eval-geom", help="accuracy/completion/F1 of two point clouds")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--thresh", type=float, default=0.03)
    p.add_argument("--csv", type=Path)

    p = sub.add_parser("basin", help="convergence-basin sweep, radial on vs off")
    p.add_argument("--scene", default="basin", choices=FIXTURES)
    p.add_argument("--out", type=Path)
    p.add_argument("--csv", type=Path)
    _add_config_flags(p)

    p = sub.add_parser("render-debug", help="render a saved map to PPM/PGM images")
    p.add_argument("--map", type=Path, required=True)
    p.add_argument("--pose", type=float, nargs=7, required=True, metavar=("TX", "TY", "TZ", "QX", "QY", "QZ", "QW"),
                   help="camera-to-world pose as in TUM trajectories")
    p.add_argument("--out", type=Path, default=Path("."))
    p.add_argument("--depth-mode", choices=["mean", "median", "adaptive"])
    _add_config_flags(p)

    p = sub.add_parser("make-synthetic", help="write a synthetic fixture as a TUM directory")
    p.add_argument("--name", choices=FIXTURES, default="box50")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--frames", type=int)
    p.add_argument("--noise", type=float, default=0.0)
    return parser


def _config(args, extra=()):
    overrides = list(args.overrides) + list(extra)
    if args.threads is not None:
        overrides.append(("run", "threads", args.threads))
    return load_config(args.config, overrides)


def _write_csv(table: pd.DataFrame, path):
    if path is None:
        return
    try:
        table.to_csv(path, index=False)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def _open_dataset(name: str, cfg: SlamConfig, args):
    """(frames iterable, intrinsics, ground-truth trajectory or None, ground-truth surface or None, length)."""
    if name.startswith(SYNTHETIC_PREFIX):
        fixture = name[len(SYNTHETIC_PREFIX):]
        seq = synthetic_fixture(fixture, n_frames=args.frames, noise=args.noise,
                                dropout=0.01 if args.noise else 0.0, seed=cfg.run.seed)
        return seq.frames(), seq.K, seq.groundtruth, sample_surface(seq), len(seq)
    seq = load_tum(name, cfg.camera.intrinsics(), cfg.camera.depth_scale)
    frames = seq.frames()
    total = len(seq)
    if args.frames:
        total = min(total, args.frames)
        frames = (f for _, f in zip(range(total), frames))
    return frames, seq.K, seq.groundtruth, None, total


def cmd_run(args):
    args.out.mkdir(parents=True, exist_ok=True)
    configure_logging(args.verbose, args.out / "run.log")
    extra = []
    if args.tracker:
        extra.append(("tracking", "tracker", args.tracker))
    if args.depth_mode:
        extra.append(("render", "depth_mode", args.depth_mode))
    if args.no_radial:
        extra.append(("tracking", "radial_enabled", False))
    cfg = _config(args, extra)
    frames, K, groundtruth, surface, total = _open_dataset(args.dataset, cfg, args)
    cfg.camera = replace(cfg.camera, fx=float(K.fx), fy=float(K.fy), cx=float(K.cx), cy=float(K.cy),
                         width=int(K.width), height=int(K.height))
    write_config(cfg, args.out / "config.yaml")
    logger.info("run on {} ({} frames, {}x{}) with {} tracker", args.dataset, total, K.width, K.height,
                cfg.tracking.tracker.value)
    state = run_sequence(frames, K, cfg, total=total, progress=cfg.run.progress)
    finalize(state, cfg, args.out)
    if groundtruth:
        write_trajectory_tum(groundtruth, args.out / "groundtruth.txt")
    cloud = export_results(state, args.out, cfg)

    metrics = {"frames": len(state.trajectory), "keyframes": len(state.keyframes), "surfels": len(state.smap)}
    metrics["map_bytes"] = (args.out / "map.ply").stat().st_size
    metrics.update(state.runtime_row())
    metrics.update(keyframe_metrics(state.smap, state.keyframes, K, cfg.render))
    if groundtruth:
        metrics.update(ate(state.trajectory, groundtruth).as_row())
    if surface is not None and len(cloud):
        metrics.update(geom_metrics(cloud, surface).as_row())
    _write_csv(pd.DataFrame([metrics]), args.out / "metrics.csv")
    for key, value in metrics.items():
        print(f"{key:>14}: {value:.6g}" if isinstance(value, float) else f"{key:>14}: {value}")
    return 0


def cmd_eval_ate(args):
    configure_logging(args.verbose)
    result = ate(read_trajectory_tum(args.est), read_trajectory_tum(args.gt), args.mode)
    print(f"pairs {result.pairs}  rmse {result.rmse:.3f} m  mean {result.mean:.3f}  "
          f"median {result.median:.3f}  max {result.max:.3f}")
    _write_csv(pd.DataFrame([result.as_row()]), args.csv)
    return 0


def cmd_eval_geom(args):
    configure_logging(args.verbose)
    result = geom_metrics(read_ply(args.pred), read_ply(args.gt), args.thresh)
    print(f"accuracy {result.accuracy:.2f} cm  completion {result.completion:.2f} cm  "
          f"precision {result.precision:.1f}  recall {result.recall:.1f}  F1 {result.f1:.1f}")
    _write_csv(pd.DataFrame([result.as_row()]), args.csv)
    return 0


def cmd_basin(args):
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
    configure_logging(args.verbose, args.out / "run.log" if args.out else None)
    cfg = _config(args)
    seq = synthetic_fixture(args.scene)
    table = basin_sweep(seq.scene, seq.K, cfg.basin, render_cfg=cfg.render, tracking_cfg=cfg.tracking)
    print(table.pivot(index="radius", columns="variant", values="success_rate").to_string())
    _write_csv(table, args.csv or (args.out / "basin.csv" if args.out else None))
    return 0


def cmd_render_debug(args):
    configure_logging(args.verbose)
    extra = [("render", "depth_mode", args.depth_mode)] if args.depth_mode else []
    if args.config is None and (args.map.parent / "config.yaml").is_file():
        # a map written by `run` renders with that run's camera
        args.config = args.map.parent / "config.yaml"
        logger.info("using camera and render settings from {}", args.config)
    cfg = _config(args, extra)
    smap = read_map_ply(args.map)
    pose = Pose.from_tum(np.array(args.pose))
    K = cfg.camera.intrinsics()
    out = render(smap, pose, K, cfg.render)
    logger.info("rendered {} surfels at {}x{}", len(smap), K.width, K.height)
    for path in dump_debug_images(out, args.out):
        print(path)
    return 0


def cmd_make_synthetic(args):
    configure_logging(args.verbose)
    seq = synthetic_fixture(args.name, n_frames=args.frames, noise=args.noise, dropout=0.01 if args.noise else 0.0)
    write_tum_sequence(seq, args.out)
    K = seq.K
    print(f"camera fx={K.fx} fy={K.fy} cx={K.cx} cy={K.cy} width={K.width} height={K.height}")
    return 0


COMMANDS = {
    "run": cmd_run,
    "eval-ate": cmd_eval_ate,
    "eval-geom": cmd_eval_geom,
    "basin": cmd_basin,
    "render-debug": cmd_render_debug,
    "make-synthetic": cmd_make_synthetic,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except SlamError as exc:
        logger.error("{}", exc)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
