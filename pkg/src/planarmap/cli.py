"""Command-line front end: filter, extract, map, synth, eval, bench."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import operator
import re
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .config import ConfigError, PipelineConfig
from .diffusion import DiffusionParams, diffuse
from .imaging import (
    CameraIntrinsics,
    DepthImage,
    ImageFormatError,
    InvalidDepthError,
    Pose,
    read_depth,
    read_intrinsics,
    write_depth,
    write_intrinsics,
)
from .mapman import MapManager, dumps, map_from_json, map_to_json, polygon_to_json, write_ply
from .normals import compute_normals, write_normal_png

log = logging.getLogger("planarmap")

EXIT_OK = 0
EXIT_ASSERT = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_FORMAT = 4
EXIT_CONFIG = 5
EXIT_SKIPPED = 6
EXIT_SCHEMA = 7


class AssertionFailed(Exception):
    pass


class TooManySkipped(Exception):
    pass


class SchemaError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _load_config(args) -> PipelineConfig:
    cfg = cfgmod.load(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.workers is not None:
        cfg = dataclasses.replace(cfg, workers=args.workers)
    return cfg


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(dumps(obj))


def _read_json(path) -> dict:
    try:
        rec = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ImageFormatError(f"{path}: malformed JSON ({exc})") from exc
    if not isinstance(rec, dict):
        raise ImageFormatError(f"{path}: expected a JSON object")
    return rec


def _read_versioned(path, required: tuple[str, ...]) -> dict:
    rec = _read_json(path)
    if rec.get("schema") != 1:
        raise SchemaError(f"{path}: unsupported schema {rec.get('schema')!r} (expected 1)")
    missing = [k for k in required if k not in rec]
    if missing:
        raise SchemaError(f"{path}: missing {', '.join(missing)}")
    return rec


def _load_truth(path):
    from .scenegen import GroundTruth

    rec = _read_versioned(path, ("planes",))
    try:
        return GroundTruth.from_json(rec)
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: {exc}") from exc


_OPS = {">=": operator.ge, "<=": operator.le, ">": operator.gt, "<": operator.lt, "==": operator.eq}
_ASSERT_RE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*(>=|<=|==|>|<)\s*([-+0-9.eE]+)\s*$")


def parse_asserts(spec: str | None) -> list[tuple[str, str, float]]:
    """``"iou>=0.95,dd_mean<=2"`` -> [(name, op, value), ...]."""
    if not spec:
        return []
    out = []
    for part in spec.split(","):
        m = _ASSERT_RE.match(part)
        if not m:
            raise ConfigError(f"bad --assert clause {part!r}")
        out.append((m.group(1), m.group(2), float(m.group(3))))
    return out


def check_asserts(values: dict, clauses) -> list[str]:
    failures = []
    for name, op, ref in clauses:
        if name not in values:
            raise ConfigError(f"--assert refers to unknown metric {name!r}")
        v = values[name]
        ok = v is not None and not (isinstance(v, float) and np.isnan(v)) and _OPS[op](v, ref)
        print(f"assert {name} {op} {ref}: {'pass' if ok else 'FAIL'} ({v})")
        if not ok:
            failures.append(name)
    return failures


def read_poses_jsonl(path) -> list[dict]:
    recs = []
    for i, line in enumerate(Path(path).read_text().splitlines()):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ImageFormatError(f"{path}:{i + 1}: malformed pose record") from exc
        missing = [k for k in ("t", "tx", "ty", "tz", "qx", "qy", "qz", "qw") if k not in rec]
        if missing:
            raise ImageFormatError(f"{path}:{i + 1}: pose record lacks {', '.join(missing)}")
        recs.append(rec)
    return recs


def write_poses_jsonl(path, poses, frames=None) -> None:
    lines = []
    for i, p in enumerate(poses):
        rec = p.to_record(float(i))
        if frames is not None:
            rec["frame"] = frames[i]
        lines.append(json.dumps(rec, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_filter(args) -> int:
    img = read_depth(args.input)
    base = PipelineConfig().diffusion if not args.config else _load_config(args).diffusion
    params = DiffusionParams(
        gamma=args.gamma if args.gamma is not None else base.gamma,
        k=args.k if args.k is not None else base.k,
        iterations=args.iters if args.iters is not None else base.iterations,
    )
    out = diffuse(img, params)
    write_depth(args.output, out)
    if args.emit_normals:
        if not args.intrinsics:
            raise ConfigError("--emit-normals needs --intrinsics")
        K = read_intrinsics(args.intrinsics)
        write_normal_png(args.emit_normals, compute_normals(out, K, args.normal_mode))
    return EXIT_OK


def _extract(depth: DepthImage, K: CameraIntrinsics, cfg: PipelineConfig):
    from .pipeline import process_frame

    if not depth.valid.any():
        return [], []
    res = process_frame(depth, K, cfg)
    log.info("stage times (ms): %s", {k: round(v, 2) for k, v in res.timings.items()})
    return res.polygons, res.diagnostics


def cmd_extract(args) -> int:
    cfg = _load_config(args)
    depth = read_depth(args.depth)
    K = read_intrinsics(args.intrinsics)
    polys, diag = _extract(depth, K, cfg)
    recs = []
    for i, p in enumerate(polys):
        rec = polygon_to_json(p.with_id(i))
        recs.append(rec)
    _write_json(args.out, {"schema": 1, "frame": "camera", "polygons": recs, "diagnostics": diag})
    print(f"{len(recs)} polygons -> {args.out}")
    return EXIT_OK


def _frame_files(frames_dir) -> list[Path]:
    d = Path(frames_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"{frames_dir} is not a directory")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in (".pgm", ".png"))


def cmd_map(args) -> int:
    cfg = _load_config(args)
    if args.no_compensate:
        cfg = dataclasses.replace(cfg, merge=dataclasses.replace(cfg.merge, compensate=False))
    K = read_intrinsics(args.intrinsics)
    files = _frame_files(args.frames)
    recs = read_poses_jsonl(args.poses)
    by_name = {r["frame"]: r for r in recs if "frame" in r}
    jobs = []
    skipped = 0
    for i, f in enumerate(files):
        rec = by_name.get(f.name) if by_name else (recs[i] if i < len(recs) else None)
        if rec is None:
            log.warning("no pose for frame %s; skipped", f.name)
            skipped += 1
            continue
        jobs.append((float(rec["t"]), f.name, f, Pose.from_record(rec)))
    jobs.sort(key=lambda j: (j[0], j[1]))
    mgr = MapManager(cfg.merge, cfg.drift)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report_lines = []
    for t, name, f, pose in jobs:
        polys, _ = _extract(read_depth(f), K, cfg)
        rep = mgr.merge(polys, pose)
        rec = rep.to_json()
        rec.update(t=t, file=name, polygons=len(polys))
        report_lines.append(json.dumps(rec, sort_keys=True))
    pmap = mgr.snapshot()
    _write_json(out / "map.json", map_to_json(pmap))
    write_ply(out / "map.ply", pmap.polygons)
    (out / "reports.jsonl").write_text("\n".join(report_lines) + ("\n" if report_lines else ""))
    msg = (
        f"{len(jobs)} frames, {skipped} skipped, {len(pmap.polygons)} polygons, "
        f"x_hat={pmap.drift.x_hat * 1000:.2f} mm"
    )
    if args.truth:
        from .evalbench import height_spread

        gt = _load_truth(args.truth)
        msg += f", height spread={height_spread(pmap.polygons, gt, cfg.match):.2f} mm"
    print(msg + f" -> {out}")
    if files and skipped > 0.1 * len(files):
        raise TooManySkipped(f"{skipped} of {len(files)} frames had no pose")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .scenegen import (
        NoiseSpec,
        Scene,
        add_noise,
        default_intrinsics,
        default_pose,
        drift_pose_sequence,
        merge_truth,
        render_depth,
        sweep_poses,
    )

    cfg = _load_config(args)
    cam = cfg.camera
    frames = args.frames if args.frames is not None else cam.frames
    drift = args.drift_mm if args.drift_mm is not None else cam.drift_mm_per_frame
    noise = cfg.noise
    if args.noise_sigma is not None or args.dropout is not None:
        noise = NoiseSpec(
            gaussian_sigma=args.noise_sigma if args.noise_sigma is not None else noise.gaussian_sigma,
            quantize_mm=noise.quantize_mm,
            dropout_rate=args.dropout if args.dropout is not None else noise.dropout_rate,
            edge_jitter_px=noise.edge_jitter_px,
        )
    K = default_intrinsics(cam.width, cam.height)
    scene = Scene(staircase=cfg.staircase)
    poses = [default_pose()] if frames == 1 else sweep_poses(frames)
    out = Path(args.out)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    truths = []
    names = []
    for i, pose in enumerate(poses):
        depth, gt = render_depth(scene, pose, K)
        depth = add_noise(depth, noise, seed=cfg.seed * 100003 + i)
        name = f"frame_{i:04d}.pgm"
        write_depth(out / "frames" / name, depth)
        truths.append(gt)
        names.append(name)
    write_intrinsics(out / "intrinsics.txt", K)
    write_poses_jsonl(out / "poses.jsonl", poses, names)
    if drift:
        write_poses_jsonl(out / "poses_drift.jsonl", drift_pose_sequence(poses, drift), names)
    _write_json(out / "truth.json", merge_truth(truths).to_json())
    print(f"{len(poses)} frames at {cam.width}x{cam.height} -> {out}")
    return EXIT_OK


def _load_world_polygons(path):
    rec = _read_versioned(path, ("polygons",))
    if rec.get("frame") == "camera":
        raise SchemaError(f"{path}: camera-frame polygons; evaluate a world map instead")
    try:
        return list(map_from_json({"drift": {}, **rec}).polygons)
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: {exc}") from exc


def cmd_eval(args) -> int:
    from .evalbench import evaluate, truth_polygons

    cfg = _load_config(args)
    polys = _load_world_polygons(args.map)
    gt = _load_truth(args.truth)
    m = evaluate(polys, gt, cfg.match)
    print(json.dumps(m.to_json(), sort_keys=True))
    if args.out:
        _write_json(args.out, {"schema": 1, **m.to_json()})
    if args.plot:
        from .plotting import plot_map

        plot_map(polys, args.plot, truth_polygons(gt, cfg.match.min_truth_pixels))
    failures = check_asserts(m.to_json(), parse_asserts(args.assert_))
    if failures:
        raise AssertionFailed(", ".join(failures))
    return EXIT_OK


def _parse_resolutions(text: str):
    out = []
    for part in text.split(","):
        m = re.fullmatch(r"\s*(\d+)x(\d+)\s*", part)
        if not m:
            raise ConfigError(f"bad resolution {part!r}; expected WxH")
        out.append((int(m.group(1)), int(m.group(2))))
    return out


def cmd_bench(args) -> int:
    from .evalbench import bench_pipeline, timings_csv
    from .scenegen import Scene

    cfg = _load_config(args)
    rows = bench_pipeline(
        Scene(staircase=cfg.staircase),
        resolutions=_parse_resolutions(args.resolutions),
        repeats=args.repeats,
        warmup=args.warmup,
        cfg=cfg,
    )
    text = timings_csv(rows)
    sys.stdout.write(text)
    if args.csv:
        Path(args.csv).parent.mkdir(parents=True, exist_ok=True)
        Path(args.csv).write_text(text)
    if args.plot:
        from .plotting import plot_timings

        plot_timings(rows, args.plot)
    # assertions apply to the largest resolution
    last = max(rows, key=lambda r: r.width * r.height)
    values = {f: getattr(last, f) for f in ("diffusion", "normals", "segmentation", "ransac", "merge", "total")}
    values["polygon_count"] = last.polygon_count
    failures = check_asserts(values, parse_asserts(args.assert_))
    if failures:
        raise AssertionFailed(", ".join(failures))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML pipeline config")
    common.add_argument("--seed", type=int, help="seed for every random stream")
    common.add_argument("--workers", type=int, help="kernel threads (default: all)")
    common.add_argument("--assert", dest="assert_", metavar="EXPR", help="e.g. 'iou>=0.95,dd_mean<=2'")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="planarmap", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("filter", parents=[common], help="anisotropic diffusion of a depth image")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--gamma", type=float)
    s.add_argument("--k", type=float)
    s.add_argument("--iters", type=int)
    s.add_argument("--emit-normals", metavar="PNG")
    s.add_argument("--intrinsics")
    s.add_argument("--normal-mode", default="gradient", choices=("gradient", "geometric"))
    s.set_defaults(func=cmd_filter)

    s = sub.add_parser("extract", parents=[common], help="planar polygons of one depth frame")
    s.add_argument("depth")
    s.add_argument("intrinsics")
    s.add_argument("out")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("map", parents=[common], help="merge a frame sequence into a world map")
    s.add_argument("frames")
    s.add_argument("poses")
    s.add_argument("intrinsics")
    s.add_argument("out")
    s.add_argument("--no-compensate", action="store_true", help="freeze the drift filter")
    s.add_argument("--truth", help="truth JSON; reports the worst tread height error")
    s.set_defaults(func=cmd_map)

    s = sub.add_parser("synth", parents=[common], help="render a synthetic staircase sequence")
    s.add_argument("out")
    s.add_argument("--frames", type=int)
    s.add_argument("--drift-mm", type=float, help="vertical odometry drift per frame")
    s.add_argument("--noise-sigma", type=float)
    s.add_argument("--dropout", type=float)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("eval", parents=[common], help="compare a map against ground truth")
    s.add_argument("map")
    s.add_argument("truth")
    s.add_argument("--out", help="metrics JSON")
    s.add_argument("--plot", help="plan-view PNG")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", parents=[common], help="per-stage timing harness")
    s.add_argument("--resolutions", default="320x240,640x480")
    s.add_argument("--repeats", type=int, default=5)
    s.add_argument("--warmup", type=int, default=1)
    s.add_argument("--csv")
    s.add_argument("--plot", help="timing figure PNG")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except AssertionFailed as exc:
        print(f"assertion failed: {exc}", file=sys.stderr)
        return EXIT_ASSERT
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ImageFormatError, InvalidDepthError) as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except TooManySkipped as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SKIPPED
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
