"""Global polygon map: world transform, overlap matching, merging and
vertical drift compensation with a scalar Kalman filter.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
import shapely
from shapely.geometry import MultiPolygon, Polygon
from shapely.ops import unary_union

from .imaging import Pose
from .planefit import PlanarPolygon, Plane, planar_polygon_from_2d

log = logging.getLogger(__name__)

SCHEMA = 1


class DegeneratePolygonError(ValueError):
    pass


@dataclass(frozen=True)
class MergeParams:
    drift_tolerance: float = 0.05
    normal_angle_tol: float = 10.0
    plan_overlap_min: float = 1e-4
    # False freezes the drift filter (no compensation)
    compensate: bool = True

    def __post_init__(self):
        if min(self.drift_tolerance, self.normal_angle_tol, self.plan_overlap_min) <= 0:
            raise ValueError("merge parameters must be positive")


@dataclass(frozen=True)
class DriftFilter:
    x_hat: float = 0.0
    P: float = 1e-2
    sigma_p: float = 1e-4
    sigma_m: float = 1e-6

    def __post_init__(self):
        if not self.P > 0:
            raise ValueError("P must be positive")
        if self.sigma_p < 0:
            raise ValueError("sigma_p must be >= 0")
        if not self.sigma_m > 0:
            raise ValueError("sigma_m must be positive")


def kalman_gain(f: DriftFilter) -> float:
    p_pred = f.P + f.sigma_p
    return p_pred / (p_pred + f.sigma_m)


def kalman_update(f: DriftFilter, z_k: float) -> DriftFilter:
    x_pred = f.x_hat
    p_pred = f.P + f.sigma_p
    gain = p_pred / (p_pred + f.sigma_m)
    x_new = x_pred + gain * (z_k - x_pred)
    p_new = (1.0 - gain) * p_pred
    return replace(f, x_hat=x_new, P=p_new)


class DriftMeasurement(NamedTuple):
    z_k: float
    match_count: int


class Match(NamedTuple):
    incoming: int
    map_id: int
    dz: float  # signed z_new - z_map
    overlap: float


@dataclass(frozen=True)
class PolygonMap:
    polygons: tuple = ()
    drift: DriftFilter = field(default_factory=DriftFilter)
    frame_count: int = 0
    params: MergeParams = field(default_factory=MergeParams)
    next_id: int = 0

    def get(self, pid: int) -> PlanarPolygon:
        for p in self.polygons:
            if p.id == pid:
                return p
        raise KeyError(pid)


@dataclass
class FrameReport:
    frame: int
    inserted: list = field(default_factory=list)
    merged: list = field(default_factory=list)  # (incoming index, map id)
    z_k: float | None = None
    match_count: int = 0
    gain: float | None = None
    x_hat: float = 0.0
    P: float = 0.0

    def to_json(self) -> dict:
        return {
            "frame": self.frame,
            "inserted": list(self.inserted),
            "merged": [list(m) for m in self.merged],
            "z_k": self.z_k,
            "match_count": self.match_count,
            "gain": self.gain,
            "x_hat": self.x_hat,
            "P": self.P,
        }


# ---------------------------------------------------------------------------
# geometry helpers


def is_horizontal(poly: PlanarPolygon, tol_deg: float) -> bool:
    return abs(poly.plane.normal[2]) >= math.cos(math.radians(tol_deg))


def to_world(poly: PlanarPolygon, pose: Pose, normal_angle_tol: float = 10.0) -> PlanarPolygon:
    R, t = pose.R, pose.translation
    plane = poly.plane.transformed(R, t)
    if abs(plane.normal[2]) >= math.cos(math.radians(normal_angle_tol)):
        plane = plane.oriented_up()
    return replace(
        poly,
        vertices=pose.apply(poly.vertices),
        holes=tuple(pose.apply(h) for h in poly.holes),
        plane=plane,
        centroid=pose.apply(poly.centroid),
        area=poly.area,
        frame="world",
    )


def shift_z(poly: PlanarPolygon, dz: float) -> PlanarPolygon:
    off = np.array([0.0, 0.0, dz])
    return replace(
        poly,
        vertices=poly.vertices + off,
        holes=tuple(h + off for h in poly.holes),
        plane=Plane(poly.plane.normal, poly.plane.d - poly.plane.normal[2] * dz),
        centroid=poly.centroid + off,
        area=poly.area,
    )


def plan_view(poly: PlanarPolygon) -> Polygon:
    return Polygon(_snap(poly.vertices[:, :2]), [_snap(h[:, :2]) for h in poly.holes]).buffer(0)


def _in_plane(poly: PlanarPolygon, plane: Plane) -> Polygon:
    """Orthogonal projection of ``poly`` into ``plane``'s 2-D coordinates."""
    return Polygon(_snap(plane.to_2d(poly.vertices)), [_snap(plane.to_2d(h)) for h in poly.holes]).buffer(0)


def _snap(xy, decimals: int = 12):
    # round-off from the projection (down to subnormals) trips GEOS noding
    return np.round(xy, decimals) + 0.0


def polygon_union_2d(a: Polygon, b: Polygon):
    """Exact boolean union; a Polygon (possibly with holes) or a MultiPolygon."""
    for g in (a, b):
        if g.is_empty or not g.is_valid or g.area <= 0:
            raise DegeneratePolygonError("union input must be a valid polygon with positive area")
    a, b = shapely.transform(a, _snap), shapely.transform(b, _snap)
    try:
        return unary_union([a, b])
    except shapely.errors.GEOSException:
        return shapely.union_all([a, b], grid_size=1e-9)


# ---------------------------------------------------------------------------
# matching, drift, merging


def _pair_overlap(new: PlanarPolygon, old: PlanarPolygon, params: MergeParams) -> float | None:
    cos_tol = math.cos(math.radians(params.normal_angle_tol))
    if float(new.plane.normal @ old.plane.normal) < cos_tol:
        return None
    dz = abs(new.centroid[2] - old.centroid[2])
    if dz > params.drift_tolerance:
        return None
    if is_horizontal(new, params.normal_angle_tol) and is_horizontal(old, params.normal_angle_tol):
        area = plan_view(new).intersection(plan_view(old)).area
    else:
        # plan view of a steep plane is degenerate; compare in the stored plane instead
        if abs(float(old.plane.normal @ new.centroid) + old.plane.d) > params.drift_tolerance:
            return None
        area = _in_plane(new, old.plane).intersection(_in_plane(old, old.plane)).area
    return area if area > params.plan_overlap_min else None


def match_polygons(pmap: PolygonMap, incoming) -> list[Match]:
    out = []
    for i, new in enumerate(incoming):
        best = None
        for old in pmap.polygons:
            ov = _pair_overlap(new, old, pmap.params)
            if ov is not None and (best is None or ov > best[1]):
                best = (old, ov)
        if best is not None:
            old, ov = best
            out.append(Match(i, old.id, float(new.centroid[2] - old.centroid[2]), float(ov)))
    return out


def measure_drift(dzs, x_hat: float) -> DriftMeasurement | None:
    """Mean signed centroid residual plus the current estimate; None when nothing matched."""
    dzs = list(dzs)
    if not dzs:
        return None
    return DriftMeasurement(float(np.mean(dzs)) + x_hat, len(dzs))


def merge_pair(a: PlanarPolygon, b: PlanarPolygon) -> PlanarPolygon:
    nb = b.plane.normal if a.plane.normal @ b.plane.normal >= 0 else -b.plane.normal
    wa, wb = a.area, b.area
    n = wa * a.plane.normal + wb * nb
    n /= np.linalg.norm(n)
    c = (wa * a.centroid + wb * b.centroid) / (wa + wb)
    plane = Plane.from_point_normal(c, n)
    if plane.normal @ a.plane.normal < 0:
        plane = plane.flipped()
    fa, fb = _in_plane(a, plane), _in_plane(b, plane)
    try:
        union = polygon_union_2d(fa, fb)
    except DegeneratePolygonError:
        log.warning("merge of polygons %s and %s failed; keeping the larger", a.id, b.id)
        return a if wa >= wb else replace(b, id=a.id)
    if isinstance(union, MultiPolygon):
        log.warning("merge of polygons %s and %s is disconnected; keeping the larger", a.id, b.id)
        return a if wa >= wb else replace(b, id=a.id)
    return planar_polygon_from_2d(
        plane,
        union,
        frame=a.frame,
        inlier_fraction=(wa * a.inlier_fraction + wb * b.inlier_fraction) / (wa + wb),
        fit_error=(wa * a.fit_error + wb * b.fit_error) / (wa + wb),
        id=a.id,
    )


def merge_frame(pmap: PolygonMap, frame_polys, pose: Pose) -> tuple[PolygonMap, FrameReport]:
    params = pmap.params
    report = FrameReport(frame=pmap.frame_count)
    x_old = pmap.drift.x_hat
    incoming = [shift_z(to_world(p, pose, params.normal_angle_tol), -x_old) for p in frame_polys]
    matches = match_polygons(pmap, incoming)
    drift = pmap.drift
    horiz = [m.dz for m in matches if is_horizontal(incoming[m.incoming], params.normal_angle_tol)]
    meas = measure_drift(horiz, x_old)
    if meas is not None:
        report.z_k, report.match_count = meas.z_k, meas.match_count
        if params.compensate:
            report.gain = kalman_gain(drift)
            drift = kalman_update(drift, meas.z_k)
            delta = drift.x_hat - x_old
            incoming = [shift_z(p, -delta) for p in incoming]

    stored = {p.id: p for p in pmap.polygons}
    order = [p.id for p in pmap.polygons]
    next_id = pmap.next_id
    matched = {m.incoming: m.map_id for m in matches}
    absorbed = {}  # id folded into another polygon earlier in this frame -> its new owner
    for i, poly in enumerate(incoming):
        if i in matched:
            mid = matched[i]
            while mid in absorbed:
                mid = absorbed[mid]
            stored[mid] = merge_pair(stored[mid], poly)
            report.merged.append((i, mid))
            for oid in _absorb_overlaps(stored, order, mid, params):
                absorbed[oid] = mid
        else:
            stored[next_id] = replace(poly, id=next_id)
            order.append(next_id)
            report.inserted.append(next_id)
            next_id += 1
    report.x_hat, report.P = drift.x_hat, drift.P
    new_map = PolygonMap(
        polygons=tuple(stored[i] for i in order if i in stored),
        drift=drift,
        frame_count=pmap.frame_count + 1,
        params=params,
        next_id=next_id,
    )
    return new_map, report


def _absorb_overlaps(stored: dict, order: list, mid: int, params: MergeParams) -> list:
    """A grown polygon may now match other stored polygons; fold them in.
    Returns the absorbed ids."""
    gone = []
    changed = True
    while changed:
        changed = False
        cur = stored[mid]
        for oid in order:
            if oid == mid or oid not in stored:
                continue
            if _pair_overlap(stored[oid], cur, params) is not None:
                stored[mid] = merge_pair(cur, stored[oid])
                del stored[oid]
                gone.append(oid)
                changed = True
                break
    order[:] = [i for i in order if i in stored]
    return gone


class MapManager:
    """Owns a PolygonMap and hands out immutable snapshots."""

    def __init__(self, params: MergeParams | None = None, drift: DriftFilter | None = None):
        self._map = PolygonMap(drift=drift or DriftFilter(), params=params or MergeParams())
        self.reports: list[FrameReport] = []

    def merge(self, frame_polys, pose: Pose) -> FrameReport:
        self._map, report = merge_frame(self._map, frame_polys, pose)
        self.reports.append(report)
        return report

    def snapshot(self) -> PolygonMap:
        return self._map


# ---------------------------------------------------------------------------
# export


def _r(x) -> float:
    return float(x)


def polygon_to_json(p: PlanarPolygon) -> dict:
    return {
        "id": p.id,
        "normal": [_r(v) for v in p.plane.normal],
        "d": _r(p.plane.d),
        "centroid": [_r(v) for v in p.centroid],
        "area": _r(p.area),
        "vertices": [[_r(v) for v in row] for row in p.vertices],
        "holes": [[[_r(v) for v in row] for row in h] for h in p.holes],
        "frame": p.frame,
        "inlier_fraction": _r(p.inlier_fraction),
        "fit_error": _r(p.fit_error),
    }


def polygon_from_json(rec: dict) -> PlanarPolygon:
    return PlanarPolygon(
        np.asarray(rec["vertices"], dtype=np.float64),
        Plane(np.asarray(rec["normal"], dtype=np.float64), rec["d"]),
        tuple(np.asarray(h, dtype=np.float64) for h in rec.get("holes", [])),
        frame=rec.get("frame", "world"),
        inlier_fraction=rec.get("inlier_fraction", 1.0),
        fit_error=rec.get("fit_error", 0.0),
        id=rec.get("id"),
    )


def map_to_json(pmap: PolygonMap) -> dict:
    return {
        "schema": SCHEMA,
        "polygons": [polygon_to_json(p) for p in pmap.polygons],
        "drift": {"x_hat": _r(pmap.drift.x_hat), "P": _r(pmap.drift.P)},
        "frame_count": pmap.frame_count,
    }


def dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def map_from_json(rec: dict, params: MergeParams | None = None, drift: DriftFilter | None = None) -> PolygonMap:
    if rec.get("schema") != SCHEMA:
        raise ValueError(f"unsupported map schema {rec.get('schema')!r}")
    polys = tuple(polygon_from_json(p) for p in rec["polygons"])
    base = drift or DriftFilter()
    d = rec.get("drift", {})
    return PolygonMap(
        polygons=polys,
        drift=replace(base, x_hat=d.get("x_hat", base.x_hat), P=d.get("P", base.P)),
        frame_count=rec.get("frame_count", 0),
        params=params or MergeParams(),
        next_id=max((p.id for p in polys if p.id is not None), default=-1) + 1,
    )


def write_ply(path, polygons) -> None:
    """ASCII PLY; each polygon contributes its own vertices and triangles."""
    verts = []
    faces = []
    for p in polygons:
        fp = p.footprint()
        tris = shapely.constrained_delaunay_triangles(fp)
        base = len(verts)
        index = {}
        for tri in getattr(tris, "geoms", []):
            ids = []
            for xy in list(tri.exterior.coords)[:3]:
                key = (round(xy[0], 12), round(xy[1], 12))
                if key not in index:
                    index[key] = base + len(index)
                    verts.append(p.plane.from_2d(np.array(xy)))
                ids.append(index[key])
            faces.append((ids, p.id))
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(verts)}",
        "property float x",
        "property float y",
        "property float z",
        f"element face {len(faces)}",
        "property list uchar int vertex_indices",
        "property int polygon_id",
        "end_header",
    ]
    lines += [f"{v[0]:.6f} {v[1]:.6f} {v[2]:.6f}" for v in verts]
    lines += [f"3 {a} {b} {c} {pid if pid is not None else -1}" for (a, b, c), pid in faces]
    Path(path).write_text("\n".join(lines) + "\n")
