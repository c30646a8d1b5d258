"""RANSAC plane fitting for pixel polygons and the 3-D planar polygons it produces.

Hypotheses are scored by the summed point-plane distance over all points (the
lowest total wins), and a plane is accepted only when the winner's inlier
fraction exceeds ``min_inlier_fraction``. The winner is then refined by total
least squares over its inliers.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numba
import numpy as np
from shapely.geometry import Polygon

from .imaging import CameraIntrinsics, DepthImage
from .segmentation import PixelPolygon, fill_rings

log = logging.getLogger(__name__)


class CollinearPointsError(ValueError):
    pass


class TooFewPointsError(ValueError):
    pass


class DegenerateHypothesesError(ValueError):
    pass


@dataclass(frozen=True)
class Plane:
    """n . x + d = 0 with unit n."""

    normal: np.ndarray
    d: float

    def __post_init__(self):
        n = np.array(self.normal, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(n)
        if not norm > 0:
            raise ValueError("plane normal must be nonzero")
        if abs(norm - 1.0) > 1e-9:
            raise ValueError("plane normal must be unit length")
        n.setflags(write=False)
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "d", float(self.d))

    @classmethod
    def from_point_normal(cls, point, normal) -> "Plane":
        n = np.asarray(normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        return cls(n, -float(n @ np.asarray(point, dtype=np.float64)))

    def flipped(self) -> "Plane":
        return Plane(-self.normal, -self.d)

    def oriented_to_camera(self) -> "Plane":
        """Normal facing the camera origin (d > 0), falling back to n_z < 0."""
        if abs(self.d) > 1e-12:
            return self if self.d > 0 else self.flipped()
        return self if self.normal[2] <= 0 else self.flipped()

    def oriented_up(self) -> "Plane":
        return self if self.normal[2] >= 0 else self.flipped()

    def oriented(self, frame: str) -> "Plane":
        if frame == "camera":
            return self.oriented_to_camera()
        if frame == "world":
            return self.oriented_up()
        raise ValueError(f"unknown frame {frame!r}")

    def distance(self, pts) -> np.ndarray:
        return np.abs(np.asarray(pts, dtype=np.float64) @ self.normal + self.d)

    def project(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts - np.outer(pts @ self.normal + self.d, self.normal).reshape(pts.shape)

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Origin and an in-plane orthonormal pair (e1, e2) with e1 x e2 = n."""
        n = self.normal
        helper = np.array([1.0, 0.0, 0.0]) if abs(n[2]) >= 0.9 else np.array([0.0, 0.0, 1.0])
        e1 = np.cross(helper, n)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(n, e1)
        return -self.d * n, e1, e2

    def to_2d(self, pts) -> np.ndarray:
        o, e1, e2 = self.basis()
        rel = np.asarray(pts, dtype=np.float64) - o
        return np.stack([rel @ e1, rel @ e2], axis=-1)

    def from_2d(self, uv) -> np.ndarray:
        o, e1, e2 = self.basis()
        uv = np.asarray(uv, dtype=np.float64)
        return o + uv[..., :1] * e1 + uv[..., 1:2] * e2

    def transformed(self, R, t) -> "Plane":
        n = R @ self.normal
        n = n / np.linalg.norm(n)
        return Plane(n, self.d - float(n @ t))


def fit_plane_3pts(p1, p2, p3, frame: str = "camera") -> Plane:
    p1, p2, p3 = (np.asarray(p, dtype=np.float64) for p in (p1, p2, p3))
    e1 = p2 - p1
    e2 = p3 - p1
    c = np.cross(e1, e2)
    cn = np.linalg.norm(c)
    if cn < 1e-12 * np.linalg.norm(e1) * np.linalg.norm(e2) or cn == 0.0:
        raise CollinearPointsError("points are collinear")
    n = c / cn
    return Plane(n, -float(n @ p1)).oriented(frame)


def point_plane_distance(p, plane: Plane) -> float:
    return float(abs(plane.normal @ np.asarray(p, dtype=np.float64) + plane.d))


def fit_plane_lsq(pts, frame: str = "camera") -> Plane:
    """Total least squares: centroid plus the smallest principal direction."""
    pts = np.asarray(pts, dtype=np.float64)
    if len(pts) < 3:
        raise TooFewPointsError("need at least 3 points")
    c = pts.mean(axis=0)
    cov = (pts - c).T @ (pts - c)
    _, vecs = np.linalg.eigh(cov)
    return Plane.from_point_normal(c, vecs[:, 0]).oriented(frame)


@dataclass(frozen=True)
class RansacParams:
    iterations: int = 50
    inlier_threshold: float = 0.010
    min_inlier_fraction: float = 0.9
    rng_seed: int = 0
    refine: bool = True
    max_points: int = 2000

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.inlier_threshold > 0:
            raise ValueError("inlier_threshold must be positive")
        if not 0 <= self.min_inlier_fraction <= 1:
            raise ValueError("min_inlier_fraction must be in [0, 1]")
        if self.max_points < 3:
            raise ValueError("max_points must be >= 3")


@dataclass(frozen=True)
class RansacResult:
    plane: Plane
    inlier_fraction: float
    mean_error: float
    accepted: bool
    raw_plane: Plane
    total_error: float


@numba.njit(parallel=True, cache=True)
def _score_hypotheses(pts, normals, offsets, thr, errors, inliers):
    # One hypothesis per thread; each sum runs serially in point order.
    nh = normals.shape[0]
    npts = pts.shape[0]
    for h in numba.prange(nh):
        nx = normals[h, 0]
        ny = normals[h, 1]
        nz = normals[h, 2]
        d0 = offsets[h]
        if nx == 0.0 and ny == 0.0 and nz == 0.0:
            errors[h] = np.inf
            inliers[h] = 0
            continue
        err = 0.0
        cnt = 0
        for i in range(npts):
            d = abs(nx * pts[i, 0] + ny * pts[i, 1] + nz * pts[i, 2] + d0)
            err += d
            if d < thr:
                cnt += 1
        errors[h] = err
        inliers[h] = cnt


def sample_triples(rng: np.random.Generator, n: int, count: int) -> np.ndarray:
    """``count`` rows of three distinct indices in [0, n), uniformly drawn."""
    i = rng.integers(0, n, size=count)
    j = rng.integers(0, n - 1, size=count)
    k = rng.integers(0, n - 2, size=count)
    j = j + (j >= i)
    lo = np.minimum(i, j)
    hi = np.maximum(i, j)
    k = k + (k >= lo)
    k = k + (k >= hi)
    return np.column_stack([i, j, k])


def ransac_fit(
    points, params: RansacParams, rng: np.random.Generator | None = None, frame: str = "camera"
) -> RansacResult:
    pts = np.ascontiguousarray(points, dtype=np.float64)
    n = len(pts)
    if n < 3:
        raise TooFewPointsError(f"RANSAC needs at least 3 points, got {n}")
    if rng is None:
        rng = np.random.default_rng(params.rng_seed)
    idx = sample_triples(rng, n, params.iterations)
    p1 = pts[idx[:, 0]]
    e1 = pts[idx[:, 1]] - p1
    e2 = pts[idx[:, 2]] - p1
    c = np.cross(e1, e2)
    cn = np.linalg.norm(c, axis=1)
    # collinear samples stay as zero normals and score as infinite error
    ok = cn > 1e-12 * np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1)
    normals = np.zeros_like(c)
    normals[ok] = c[ok] / cn[ok, None]
    offsets = -np.einsum("ij,ij->i", normals, p1)
    errors = np.empty(params.iterations)
    counts = np.empty(params.iterations, dtype=np.int64)
    _score_hypotheses(pts, normals, offsets, params.inlier_threshold, errors, counts)
    if not np.isfinite(errors).any():
        raise DegenerateHypothesesError("every RANSAC hypothesis was degenerate")
    best = int(np.argmin(errors))
    raw = Plane(normals[best], offsets[best]).oriented(frame)
    fraction = counts[best] / n
    dist = raw.distance(pts)
    inl = dist < params.inlier_threshold
    plane = raw
    if params.refine and inl.sum() >= 3:
        refined = fit_plane_lsq(pts[inl], frame)
        # keep the refinement only if it does not worsen the mean inlier distance
        if refined.distance(pts[inl]).mean() <= dist[inl].mean():
            plane = refined
    final = plane.distance(pts)
    final_inl = final < params.inlier_threshold
    mean_error = float(final[final_inl].mean()) if final_inl.any() else float(final.mean())
    return RansacResult(
        plane=plane,
        inlier_fraction=float(fraction),
        mean_error=mean_error,
        accepted=bool(fraction > params.min_inlier_fraction),
        raw_plane=raw,
        total_error=float(errors[best]),
    )


# ---------------------------------------------------------------------------
# Planar polygons


@dataclass(frozen=True)
class PlanarPolygon:
    vertices: np.ndarray  # (N, 3)
    plane: Plane
    holes: tuple = ()
    frame: str = "camera"
    inlier_fraction: float = 1.0
    fit_error: float = 0.0
    centroid: np.ndarray = field(default=None)
    area: float = field(default=None)
    id: int | None = None

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        holes = tuple(np.array(h, dtype=np.float64).reshape(-1, 3) for h in self.holes)
        for a in (v,) + holes:
            a.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "holes", holes)
        if self.frame not in ("camera", "world"):
            raise ValueError("frame must be 'camera' or 'world'")
        if self.centroid is None or self.area is None:
            area, centroid = _area_centroid(self.plane, v, holes)
            object.__setattr__(self, "area", area)
            object.__setattr__(self, "centroid", centroid)
        else:
            c = np.array(self.centroid, dtype=np.float64)
            c.setflags(write=False)
            object.__setattr__(self, "centroid", c)
            object.__setattr__(self, "area", float(self.area))

    def footprint(self) -> Polygon:
        """Polygon in the plane's own 2-D coordinates."""
        return Polygon(self.plane.to_2d(self.vertices), [self.plane.to_2d(h) for h in self.holes])

    def with_id(self, id_: int) -> "PlanarPolygon":
        return replace(self, id=id_)


def _area_centroid(plane: Plane, verts, holes):
    poly = Polygon(plane.to_2d(verts), [plane.to_2d(h) for h in holes])
    area = float(poly.area)
    if area <= 0:
        return 0.0, verts.mean(axis=0) if len(verts) else np.zeros(3)
    c2 = np.array(poly.centroid.coords[0])
    return area, plane.from_2d(c2)


def planar_polygon_from_2d(plane: Plane, poly2d: Polygon, **kw) -> PlanarPolygon:
    ext = plane.from_2d(np.asarray(poly2d.exterior.coords)[:-1])
    holes = tuple(plane.from_2d(np.asarray(r.coords)[:-1]) for r in poly2d.interiors)
    return PlanarPolygon(ext, plane, holes, **kw)


def rasterize(poly: PixelPolygon, width: int, height: int) -> np.ndarray:
    """Boolean mask of the pixel centers inside ``poly`` (holes excluded)."""
    return fill_rings([poly.vertices, *poly.holes], (height, width))


def _lift_ring(ring2d, plane: Plane, K: CameraIntrinsics) -> np.ndarray | None:
    ring2d = np.asarray(ring2d, dtype=np.float64)
    rays = np.column_stack([(ring2d[:, 0] - K.cx) / K.fx, (ring2d[:, 1] - K.cy) / K.fy, np.ones(len(ring2d))])
    denom = rays @ plane.normal
    if np.any(np.abs(denom) < 1e-9):
        return None
    t = -plane.d / denom
    if np.any(t <= 0):
        return None
    return rays * t[:, None]


class Extraction(NamedTuple):
    polygons: list
    diagnostics: list


def region_points(depth: DepthImage, K: CameraIntrinsics, poly: PixelPolygon, max_points: int) -> np.ndarray:
    """Deprojected valid-depth pixels inside the polygon; regions with more
    than ``max_points`` pixels are cut to exactly that many, evenly spaced in
    raster order, so every large region costs the same to fit."""
    v = np.asarray(poly.vertices)
    u0 = max(int(math.floor(v[:, 0].min())), 0)
    v0 = max(int(math.floor(v[:, 1].min())), 0)
    u1 = min(int(math.ceil(v[:, 0].max())) + 1, depth.width)
    v1 = min(int(math.ceil(v[:, 1].max())) + 1, depth.height)
    if u1 <= u0 or v1 <= v0:
        return np.empty((0, 3))
    inside = fill_rings([poly.vertices, *poly.holes], (v1 - v0, u1 - u0), (u0, v0))
    vv, uu = np.nonzero(inside & (depth.data[v0:v1, u0:u1] > 0))
    vv = vv + v0
    uu = uu + u0
    if len(vv) > max_points:
        pick = np.arange(max_points) * len(vv) // max_points
        vv = vv[pick]
        uu = uu[pick]
    z = depth.data[vv, uu].astype(np.float64) / 1000.0
    return np.column_stack([(uu - K.cx) / K.fx * z, (vv - K.cy) / K.fy * z, z])


def extract_plane_polygons(
    depth: DepthImage, K: CameraIntrinsics, polys, params: RansacParams
) -> Extraction:
    out = []
    diag = []
    for idx, poly in enumerate(polys):
        rec = {"index": idx, "pixel_area": float(poly.area)}
        pts = region_points(depth, K, poly, params.max_points)
        rec["points"] = int(len(pts))
        try:
            res = ransac_fit(pts, params, np.random.default_rng([params.rng_seed, idx]))
        except (TooFewPointsError, DegenerateHypothesesError) as exc:
            rec.update(status="dropped", reason=str(exc))
            diag.append(rec)
            continue
        rec.update(inlier_fraction=res.inlier_fraction, fit_error=res.mean_error)
        if not res.accepted:
            rec.update(status="rejected", reason="inlier fraction at or below gate")
            diag.append(rec)
            continue
        ext = _lift_ring(poly.vertices, res.plane, K)
        holes = [_lift_ring(h, res.plane, K) for h in poly.holes]
        if ext is None:
            rec.update(status="dropped", reason="polygon vertex ray parallel to plane")
            diag.append(rec)
            continue
        pp = PlanarPolygon(
            ext,
            res.plane,
            tuple(h for h in holes if h is not None),
            frame="camera",
            inlier_fraction=res.inlier_fraction,
            fit_error=res.mean_error,
        )
        if not pp.area > 0:
            rec.update(status="dropped", reason="degenerate 3-D polygon")
            diag.append(rec)
            continue
        rec.update(status="ok", area=pp.area)
        diag.append(rec)
        out.append(pp)
    log.debug("plane extraction: %d of %d polygons kept", len(out), len(diag))
    return Extraction(out, diag)
