"""Accuracy metrics against ground truth and the per-stage timing harness."""
from __future__ import annotations

import csv
import io
import math
import statistics
import time
from dataclasses import asdict, dataclass

import numpy as np
from shapely.geometry import Polygon
from shapely.ops import unary_union

from .config import MatchParams, PipelineConfig
from .imaging import Pose
from .mapman import MapManager, PolygonMap, merge_frame, to_world
from .planefit import PlanarPolygon, planar_polygon_from_2d
from .scenegen import GroundTruth, Scene, default_intrinsics, default_pose, render_depth

UP = np.array([0.0, 0.0, 1.0])
STAGE_NAMES = ("diffusion", "normals", "segmentation", "ransac", "merge")


class NoMatchesError(ValueError):
    pass


@dataclass(frozen=True)
class FrameMetrics:
    alpha_mean: float
    alpha_std: float
    iou: float
    dd_mean: float
    dd_std: float
    matched: int = 0
    extracted: int = 0

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class StageTimings:
    width: int
    height: int
    polygon_count: int
    diffusion: float = 0.0
    normals: float = 0.0
    segmentation: float = 0.0
    ransac: float = 0.0
    merge: float = 0.0

    @property
    def total(self) -> float:
        return self.diffusion + self.normals + self.segmentation + self.ransac + self.merge

    @property
    def per_pixel(self) -> float:
        """Time of the stages whose work is proportional to the pixel count."""
        return self.diffusion + self.normals + self.segmentation


# ---------------------------------------------------------------------------
# matching


def truth_polygons(gt: GroundTruth, min_pixels: int = 0) -> list[PlanarPolygon]:
    """World-frame polygons of the visible truth faces (one per connected piece)."""
    out = []
    for tp in gt.planes:
        if tp.pixel_count < min_pixels:
            continue
        for g in tp.polygons():
            out.append(planar_polygon_from_2d(tp.plane, g, frame="world", id=tp.id))
    return out


def _plane_key(p: PlanarPolygon):
    return tuple(np.round(np.append(p.plane.normal, p.plane.d), 9))


def match_to_truth(poly: PlanarPolygon, truth, angle_tol: float = 10.0, distance_tol: float = 0.02):
    """Index of the truth polygon whose plane is nearest to ``poly``'s centroid."""
    cos_tol = math.cos(math.radians(angle_tol))
    best, best_d = None, None
    for i, t in enumerate(truth):
        if abs(float(poly.plane.normal @ t.plane.normal)) < cos_tol:
            continue
        d = abs(float(t.plane.distance(poly.centroid)))
        if d < distance_tol and (best_d is None or d < best_d):
            best, best_d = i, d
    return best


def _project(poly: PlanarPolygon, plane) -> Polygon:
    return Polygon(plane.to_2d(poly.vertices), [plane.to_2d(h) for h in poly.holes]).buffer(0)


def iou(extracted, truth, angle_tol: float = 10.0, distance_tol: float = 0.02) -> float:
    """Area-weighted IOU; extracted polygons are paired with truth planes and
    both sides are projected into the truth plane."""
    extracted, truth = list(extracted), list(truth)
    groups: dict = {}
    for t in truth:
        groups.setdefault(_plane_key(t), []).append(t)
    matched: dict = {k: [] for k in groups}
    inter_sum = 0.0
    union_sum = 0.0
    for e in extracted:
        j = match_to_truth(e, truth, angle_tol, distance_tol)
        if j is None:
            union_sum += e.area
        else:
            matched[_plane_key(truth[j])].append(e)
    for key, members in groups.items():
        plane = members[0].plane
        b = unary_union([_project(t, plane) for t in members])
        if matched[key]:
            a = unary_union([_project(e, plane) for e in matched[key]])
            inter_sum += a.intersection(b).area
            union_sum += a.union(b).area
        else:
            union_sum += b.area
    if union_sum <= 0:
        return 1.0 if not extracted and not truth else 0.0
    return float(min(1.0, inter_sum / union_sum))


def normal_angle_stats(planes, up=UP) -> tuple[float, float]:
    """Mean and population std (degrees) of the angle between plane normals and ``up``."""
    planes = list(planes)
    if not planes:
        raise ValueError("need at least one plane")
    up = np.asarray(up, dtype=np.float64)
    up = up / np.linalg.norm(up)
    cosines = np.array([abs(float(p.plane.normal @ up)) for p in planes])
    ang = np.degrees(np.arccos(np.clip(cosines, -1.0, 1.0)))
    return float(ang.mean()), float(ang.std())


def is_horizontal(p: PlanarPolygon, angle_tol: float = 10.0) -> bool:
    return abs(float(p.plane.normal[2])) >= math.cos(math.radians(angle_tol))


def horizontal_height_errors(planes, truth, angle_tol: float = 10.0, distance_tol: float = 0.02) -> np.ndarray:
    """|centroid z - true face z| (mm) for each plane matched to a horizontal truth face."""
    errs = []
    for p in planes:
        j = match_to_truth(p, truth, angle_tol, distance_tol)
        if j is None or not is_horizontal(truth[j], angle_tol):
            continue
        errs.append(abs(float(p.centroid[2] - truth[j].centroid[2])) * 1000.0)
    return np.array(errs)


def height_errors(planes, truth, angle_tol: float = 10.0, distance_tol: float = 0.02) -> tuple[float, float]:
    """Mean and std (mm) of the errors from :func:`horizontal_height_errors`."""
    a = horizontal_height_errors(planes, truth, angle_tol, distance_tol)
    if a.size == 0:
        raise NoMatchesError("no plane matched a horizontal truth face")
    return float(a.mean()), float(a.std())


def height_spread(planes, gt: GroundTruth, match: MatchParams | None = None) -> float:
    """Largest height error (mm) of map treads against the truth treads.

    Each horizontal map plane is paired with the horizontal truth face it
    overlaps most in plan view, so a plane that drifted vertically by more
    than a step still finds its own tread.
    """
    match = match or MatchParams()
    truth = [t for t in truth_polygons(gt, match.min_truth_pixels) if is_horizontal(t, match.angle_tol)]
    plan = [Polygon(t.vertices[:, :2], [h[:, :2] for h in t.holes]).buffer(0) for t in truth]
    errs = []
    for p in planes:
        if not is_horizontal(p, match.angle_tol):
            continue
        fp = Polygon(p.vertices[:, :2], [h[:, :2] for h in p.holes]).buffer(0)
        overlaps = [fp.intersection(q).area for q in plan]
        if not overlaps or max(overlaps) <= 0:
            continue
        t = truth[int(np.argmax(overlaps))]
        errs.append(abs(float(p.centroid[2] - t.centroid[2])) * 1000.0)
    if not errs:
        raise NoMatchesError("no horizontal plane overlaps a truth tread")
    return float(max(errs))


def evaluate(world_polys, gt: GroundTruth, match: MatchParams | None = None) -> FrameMetrics:
    match = match or MatchParams()
    truth = truth_polygons(gt, match.min_truth_pixels)
    world_polys = list(world_polys)
    horiz = []
    n_matched = 0
    for p in world_polys:
        j = match_to_truth(p, truth, match.angle_tol, match.distance_tol)
        if j is None:
            continue
        n_matched += 1
        if is_horizontal(truth[j], match.angle_tol):
            horiz.append(p)
    if horiz:
        a_mean, a_std = normal_angle_stats(horiz)
        dd_mean, dd_std = height_errors(horiz, truth, match.angle_tol, match.distance_tol)
    else:
        a_mean = a_std = dd_mean = dd_std = float("nan")
    return FrameMetrics(
        alpha_mean=a_mean,
        alpha_std=a_std,
        iou=iou(world_polys, truth, match.angle_tol, match.distance_tol),
        dd_mean=dd_mean,
        dd_std=dd_std,
        matched=n_matched,
        extracted=len(world_polys),
    )


def evaluate_map(pmap: PolygonMap, gt: GroundTruth, match: MatchParams | None = None) -> FrameMetrics:
    return evaluate(pmap.polygons, gt, match)


# ---------------------------------------------------------------------------
# timing


def time_frame(depth, K, pose, cfg: PipelineConfig) -> StageTimings:
    """Stage timings (ms) of one pipeline run plus one merge against a seeded map."""
    from .pipeline import process_frame

    res = process_frame(depth, K, cfg)
    # merge timing: re-observe the same frame against a map seeded with it
    mgr = MapManager(cfg.merge, cfg.drift)
    mgr.merge(res.polygons, pose)
    t0 = time.perf_counter()
    merge_frame(mgr.snapshot(), res.polygons, pose)
    merge_ms = (time.perf_counter() - t0) * 1e3
    return StageTimings(
        depth.width,
        depth.height,
        len(res.polygons),
        merge=merge_ms,
        **res.timings,
    )


def bench_pipeline(
    scene: Scene | None = None,
    resolutions=((320, 240), (640, 480)),
    repeats: int = 5,
    warmup: int = 1,
    cfg: PipelineConfig | None = None,
    pose: Pose | None = None,
) -> list[StageTimings]:
    """Median-of-repeats stage timings for each resolution; warm-up runs discarded.

    Repeats are interleaved across resolutions so slow drifts of the machine
    state affect every resolution alike.
    """
    scene = scene or Scene()
    cfg = cfg or PipelineConfig()
    pose = pose or default_pose()
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    frames = []
    for w, h in resolutions:
        K = default_intrinsics(w, h)
        depth, _ = render_depth(scene, pose, K)
        frames.append((depth, K))
    for _ in range(warmup):
        for depth, K in frames:
            time_frame(depth, K, pose, cfg)
    runs = [[] for _ in frames]
    for _ in range(repeats):
        for i, (depth, K) in enumerate(frames):
            runs[i].append(time_frame(depth, K, pose, cfg))
    out = []
    for (w, h), rs in zip(resolutions, runs):
        if len({r.polygon_count for r in rs}) != 1:
            raise RuntimeError("polygon count changed between repeats")
        med = {s: statistics.median(getattr(r, s) for r in rs) for s in STAGE_NAMES}
        out.append(StageTimings(w, h, rs[0].polygon_count, **med))
    return out


CSV_FIELDS = ("width", "height", "polygon_count", "diffusion", "normals", "segmentation", "ransac", "merge", "total")


def timings_csv(rows) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(CSV_FIELDS)
    for r in rows:
        wr.writerow([r.width, r.height, r.polygon_count] + [f"{getattr(r, f):.4f}" for f in CSV_FIELDS[3:]])
    return buf.getvalue()


def world_polygons(frame_polys, pose: Pose, angle_tol: float = 10.0) -> list[PlanarPolygon]:
    return [to_world(p, pose, angle_tol) for p in frame_polys]
