"""Synthetic depth scenes with exact ground truth.

Scenes are unions of (optionally yawed) boxes: a ground slab, a staircase and
obstacles. Depth is ray cast per pixel; ground truth lists every visible
planar face, clipped to the view and to occlusions, as exact polygons.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np
from shapely import ops as shp_ops
from shapely.geometry import MultiPolygon, Polygon, box as shp_box
from shapely.geometry.base import BaseGeometry

from .imaging import CameraIntrinsics, DepthImage, Pose
from .planefit import Plane


class EmptyViewError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    center: tuple
    size: tuple  # full extents along the box's local axes
    yaw: float = 0.0  # radians about world z

    @classmethod
    def from_bounds(cls, lo, hi, yaw: float = 0.0) -> "Box":
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        return cls(tuple((lo + hi) / 2), tuple(hi - lo), yaw)

    @property
    def R(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def faces(self):
        """(outward normal, 4 corners) for faces -x, +x, -y, +y, -z, +z."""
        R = self.R
        c = np.asarray(self.center, dtype=np.float64)
        h = np.asarray(self.size, dtype=np.float64) / 2
        out = []
        for axis in range(3):
            a1, a2 = [k for k in range(3) if k != axis]
            for sign in (-1.0, 1.0):
                n_local = np.zeros(3)
                n_local[axis] = sign
                corners = []
                for s1, s2 in ((-1, -1), (1, -1), (1, 1), (-1, 1)):
                    p = np.zeros(3)
                    p[axis] = sign * h[axis]
                    p[a1] = s1 * h[a1]
                    p[a2] = s2 * h[a2]
                    corners.append(c + R @ p)
                out.append((R @ n_local, np.array(corners)))
        return out


@dataclass(frozen=True)
class StaircaseSpec:
    step_count: int = 4
    step_height: float = 0.15
    tread_depth: float = 0.28
    width: float = 1.0
    style: str = "straight"
    spiral_angle: float = 20.0  # degrees per step, spiral only
    inner_radius: float = 0.15  # spiral only

    def __post_init__(self):
        if self.step_count < 1:
            raise ValueError("step_count must be >= 1")
        if min(self.step_height, self.tread_depth, self.width) <= 0:
            raise ValueError("staircase dimensions must be positive")
        if self.style not in ("straight", "spiral"):
            raise ValueError("style must be 'straight' or 'spiral'")

    def boxes(self) -> list[Box]:
        if self.style == "straight":
            # one solid column per step, touching its neighbors
            return [
                Box.from_bounds(
                    (-self.width / 2, i * self.tread_depth, 0.0),
                    (self.width / 2, (i + 1) * self.tread_depth, (i + 1) * self.step_height),
                )
                for i in range(self.step_count)
            ]
        out = []
        r_mid = self.inner_radius + self.width / 2
        for i in range(self.step_count):
            yaw = math.radians(self.spiral_angle) * i
            c = np.array([r_mid * math.cos(yaw), r_mid * math.sin(yaw), (i + 0.5) * self.step_height])
            out.append(Box(tuple(c), (self.width, self.tread_depth, self.step_height), yaw))
        return out


@dataclass(frozen=True)
class NoiseSpec:
    gaussian_sigma: float = 0.0
    quantize_mm: bool = False
    dropout_rate: float = 0.0
    edge_jitter_px: int = 0

    def __post_init__(self):
        if self.gaussian_sigma < 0:
            raise ValueError("gaussian_sigma must be >= 0")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.edge_jitter_px < 0:
            raise ValueError("edge_jitter_px must be >= 0")


@dataclass(frozen=True)
class Scene:
    staircase: StaircaseSpec | None = field(default_factory=StaircaseSpec)
    obstacles: tuple = ()
    ground: bool = True
    ground_extent: tuple = (-2.0, -3.0, 2.0, 3.0)  # xmin, ymin, xmax, ymax
    ground_thickness: float = 0.1

    def boxes(self) -> list[Box]:
        out = []
        if self.ground:
            x0, y0, x1, y1 = self.ground_extent
            out.append(Box.from_bounds((x0, y0, -self.ground_thickness), (x1, y1, 0.0)))
        if self.staircase is not None:
            out.extend(self.staircase.boxes())
        out.extend(self.obstacles)
        return out


def default_intrinsics(width: int = 640, height: int = 480) -> CameraIntrinsics:
    K = CameraIntrinsics(460.0, 460.0, 320.0, 240.0, 640, 480)
    return K if (width, height) == (640, 480) else K.scaled(width, height)


DEFAULT_EYE = (0.0, -0.9, 1.45)
DEFAULT_TARGET = (0.0, 0.55, 0.2)


def default_pose() -> Pose:
    return Pose.look_at(DEFAULT_EYE, DEFAULT_TARGET)


def sweep_poses(n: int, start=(-0.15, -1.05, 1.4), end=(0.15, -0.75, 1.5), target=DEFAULT_TARGET) -> list[Pose]:
    """Camera gliding between two eye positions while looking at the stairs."""
    start = np.asarray(start, dtype=np.float64)
    end = np.asarray(end, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    out = []
    for i in range(n):
        s = i / max(n - 1, 1)
        eye = (1 - s) * start + s * end
        out.append(Pose.look_at(eye, tgt + (eye - start) * 0.5))
    return out


# ---------------------------------------------------------------------------
# Ray casting


@numba.njit(parallel=True, cache=True)
def _raycast(eye, Rcw, xs, ys, centers, halves, rots, depth, face):
    h, w = depth.shape
    nb = centers.shape[0]
    for i in numba.prange(h):
        for j in range(w):
            rc0 = xs[j]
            rc1 = ys[i]
            dx = Rcw[0, 0] * rc0 + Rcw[0, 1] * rc1 + Rcw[0, 2]
            dy = Rcw[1, 0] * rc0 + Rcw[1, 1] * rc1 + Rcw[1, 2]
            dz = Rcw[2, 0] * rc0 + Rcw[2, 1] * rc1 + Rcw[2, 2]
            best = np.inf
            bface = -1
            for b in range(nb):
                ox = eye[0] - centers[b, 0]
                oy = eye[1] - centers[b, 1]
                oz = eye[2] - centers[b, 2]
                # into box-local axes (R^T)
                lo0 = rots[b, 0, 0] * ox + rots[b, 1, 0] * oy + rots[b, 2, 0] * oz
                lo1 = rots[b, 0, 1] * ox + rots[b, 1, 1] * oy + rots[b, 2, 1] * oz
                lo2 = rots[b, 0, 2] * ox + rots[b, 1, 2] * oy + rots[b, 2, 2] * oz
                ld0 = rots[b, 0, 0] * dx + rots[b, 1, 0] * dy + rots[b, 2, 0] * dz
                ld1 = rots[b, 0, 1] * dx + rots[b, 1, 1] * dy + rots[b, 2, 1] * dz
                ld2 = rots[b, 0, 2] * dx + rots[b, 1, 2] * dy + rots[b, 2, 2] * dz
                tmin = -np.inf
                tmax = np.inf
                fmin = -1
                miss = False
                for a in range(3):
                    if a == 0:
                        o, d = lo0, ld0
                    elif a == 1:
                        o, d = lo1, ld1
                    else:
                        o, d = lo2, ld2
                    hh = halves[b, a]
                    if d == 0.0:
                        if o < -hh or o > hh:
                            miss = True
                            break
                        continue
                    t1 = (-hh - o) / d
                    t2 = (hh - o) / d
                    f = 2 * a
                    if t1 > t2:
                        t1, t2 = t2, t1
                        f = 2 * a + 1
                    if t1 > tmin:
                        tmin = t1
                        fmin = f
                    if t2 < tmax:
                        tmax = t2
                if miss or tmin > tmax or tmin <= 0.0 or fmin < 0:
                    continue
                if tmin < best:
                    best = tmin
                    bface = b * 6 + fmin
            if bface >= 0:
                depth[i, j] = best * 1000.0
                face[i, j] = bface
            else:
                depth[i, j] = 0.0
                face[i, j] = -1


def raycast(boxes, pose: Pose, K: CameraIntrinsics, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Depth (mm, camera z) and face id (box * 6 + face, -1 for misses) per pixel."""
    centers = np.array([b.center for b in boxes], dtype=np.float64).reshape(-1, 3)
    halves = np.array([b.size for b in boxes], dtype=np.float64).reshape(-1, 3) / 2
    rots = np.array([b.R for b in boxes], dtype=np.float64).reshape(-1, 3, 3)
    xs = (np.arange(width) - K.cx) / K.fx
    ys = (np.arange(height) - K.cy) / K.fy
    depth = np.empty((height, width))
    face = np.empty((height, width), dtype=np.int64)
    _raycast(pose.translation.copy(), pose.R, xs, ys, centers, halves, rots, depth, face)
    return depth, face


# ---------------------------------------------------------------------------
# Ground truth


@dataclass
class TruthPlane:
    id: int
    plane: Plane  # world frame, outward normal
    region: BaseGeometry  # in the plane's 2-D coordinates
    face_ids: tuple = ()
    pixel_count: int = 0

    @property
    def area(self) -> float:
        return float(self.region.area)

    @property
    def centroid(self) -> np.ndarray:
        return self.plane.from_2d(np.array(self.region.centroid.coords[0]))

    def polygons(self) -> list[Polygon]:
        return [g for g in getattr(self.region, "geoms", [self.region]) if isinstance(g, Polygon) and not g.is_empty]

    def rings_3d(self) -> list[tuple[np.ndarray, list[np.ndarray]]]:
        out = []
        for g in self.polygons():
            ext = self.plane.from_2d(np.asarray(g.exterior.coords)[:-1])
            holes = [self.plane.from_2d(np.asarray(r.coords)[:-1]) for r in g.interiors]
            out.append((ext, holes))
        return out

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "normal": [float(v) for v in self.plane.normal],
            "d": float(self.plane.d),
            "centroid": [float(v) for v in self.centroid],
            "z": float(self.centroid[2]),
            "area": self.area,
            "pixel_count": int(self.pixel_count),
            "face_ids": [int(f) for f in self.face_ids],
            "polygons": [
                {"vertices": ext.tolist(), "holes": [h.tolist() for h in holes]} for ext, holes in self.rings_3d()
            ],
        }

    @classmethod
    def from_json(cls, rec: dict) -> "TruthPlane":
        plane = Plane(np.asarray(rec["normal"], dtype=np.float64), rec["d"])
        polys = []
        for p in rec["polygons"]:
            polys.append(Polygon(plane.to_2d(np.asarray(p["vertices"])), [plane.to_2d(np.asarray(h)) for h in p["holes"]]))
        region = MultiPolygon(polys) if len(polys) != 1 else polys[0]
        return cls(int(rec["id"]), plane, region, tuple(rec.get("face_ids", ())), int(rec.get("pixel_count", 0)))


@dataclass
class GroundTruth:
    planes: list
    poses: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "schema": 1,
            "planes": [p.to_json() for p in self.planes],
            "frames": [p.to_record(float(i)) for i, p in enumerate(self.poses)],
        }

    @classmethod
    def from_json(cls, rec: dict) -> "GroundTruth":
        if rec.get("schema") != 1:
            raise ValueError("unsupported ground-truth schema")
        return cls([TruthPlane.from_json(p) for p in rec["planes"]], [Pose.from_record(f) for f in rec.get("frames", [])])


def _face_plane(normal, corner) -> Plane:
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    return Plane(n, -float(n @ corner))


def exposed_faces(boxes) -> list[TruthPlane]:
    """Box faces minus contact with touching boxes, grouped by supporting plane."""
    faces = []
    for b, bx in enumerate(boxes):
        for f, (n, corners) in enumerate(bx.faces()):
            faces.append((b * 6 + f, _face_plane(n, corners[0]), corners))
    out = []
    for fid, plane, corners in faces:
        region = Polygon(plane.to_2d(corners)).buffer(0)
        for fid2, plane2, corners2 in faces:
            if fid2 // 6 == fid // 6:
                continue
            if plane.normal @ plane2.normal < -1 + 1e-9 and abs(plane.d + plane2.d) < 1e-9:
                region = region.difference(Polygon(plane.to_2d(corners2)).buffer(0))
        if region.area > 1e-12:
            out.append(TruthPlane(fid, plane, region, (fid,)))
    # merge coplanar faces that point the same way
    groups: list[TruthPlane] = []
    for tp in out:
        for g in groups:
            if tp.plane.normal @ g.plane.normal > 1 - 1e-9 and abs(tp.plane.d - g.plane.d) < 1e-9:
                g.region = g.region.union(
                    shp_ops.transform(lambda x, y, tp=tp, g=g: _reproject2d(tp.plane, g.plane, x, y), tp.region)
                )
                g.face_ids = g.face_ids + tp.face_ids
                break
        else:
            groups.append(TruthPlane(tp.id, tp.plane, tp.region, tp.face_ids))
    return groups


def _reproject2d(src: Plane, dst: Plane, x, y):
    uv = np.column_stack([np.asarray(x), np.asarray(y)])
    p = dst.to_2d(src.from_2d(uv))
    return p[:, 0], p[:, 1]


def _halfplane_poly(a, b, c, bounds, margin=1.0) -> Polygon | None:
    """Part of the bounding box (expanded) where a*u + b*v + c >= 0."""
    x0, y0, x1, y1 = bounds
    x0, y0, x1, y1 = x0 - margin, y0 - margin, x1 + margin, y1 + margin
    pts = [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
    out = []
    for k in range(4):
        p, q = pts[k], pts[(k + 1) % 4]
        fp = a * p[0] + b * p[1] + c
        fq = a * q[0] + b * q[1] + c
        if fp >= 0:
            out.append(p)
        if (fp >= 0) != (fq >= 0):
            t = fp / (fp - fq)
            out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
    if len(out) < 3:
        return None
    return Polygon(out)


def visible_truth(
    faces: list[TruthPlane],
    pose: Pose,
    K: CameraIntrinsics,
    width: int,
    height: int,
    face_map: np.ndarray | None = None,
    z_near: float = 1e-3,
) -> list[TruthPlane]:
    """Exact visible part of each face from ``pose``, in the face's plane coordinates."""
    R = pose.R
    t = pose.translation
    rect = shp_box((-0.5 - K.cx) / K.fx, (-0.5 - K.cy) / K.fy, (width - 0.5 - K.cx) / K.fx, (height - 0.5 - K.cy) / K.fy)
    cams = []
    for tp in faces:
        n_c = R.T @ tp.plane.normal
        d_c = tp.plane.d + float(tp.plane.normal @ t)
        if d_c <= 1e-12:
            continue  # back-facing or edge-on
        cam_plane = Plane(n_c / np.linalg.norm(n_c), d_c)
        # camera z on the face as an affine function of plane coordinates
        o, e1, e2 = tp.plane.basis()
        rz = R[:, 2]
        a, b, c = float(rz @ e1), float(rz @ e2), float(rz @ (o - t)) - z_near
        region = tp.region
        if abs(a) + abs(b) < 1e-15:
            if c < 0:
                continue
        else:
            hp = _halfplane_poly(a, b, c, region.bounds)
            if hp is None:
                continue
            region = region.intersection(hp)
        if region.is_empty:
            continue

        def to_img(x, y, tp=tp):
            pw = tp.plane.from_2d(np.column_stack([np.asarray(x), np.asarray(y)]))
            pc = (pw - t) @ R
            return pc[:, 0] / pc[:, 2], pc[:, 1] / pc[:, 2]

        img = shp_ops.transform(to_img, region).buffer(0).intersection(rect)
        if img.is_empty or img.area < 1e-12:
            continue
        cams.append((tp, cam_plane, img))

    def depth_at(cam_plane: Plane, x, y):
        r = np.array([x, y, 1.0])
        return -cam_plane.d / float(cam_plane.normal @ r)

    out = []
    for i, (tp, cp, img) in enumerate(cams):
        vis = img
        for j, (tp2, cp2, img2) in enumerate(cams):
            if i == j or not vis.intersects(img2):
                continue
            inter = vis.intersection(img2)
            if inter.area < 1e-10:
                continue
            x, y = inter.representative_point().coords[0]
            if depth_at(cp2, x, y) < depth_at(cp, x, y):
                vis = vis.difference(img2)
        if vis.is_empty or vis.area < 1e-12:
            continue

        def to_plane(x, y, tp=tp, cp=cp):
            r = np.column_stack([np.asarray(x), np.asarray(y), np.ones(len(np.atleast_1d(x)))])
            s = -cp.d / (r @ cp.normal)
            pw = (r * s[:, None]) @ R.T + t
            uv = tp.plane.to_2d(pw)
            return uv[:, 0], uv[:, 1]

        region = shp_ops.transform(to_plane, vis).buffer(0)
        count = 0
        if face_map is not None:
            count = int(np.isin(face_map, list(tp.face_ids)).sum())
        out.append(TruthPlane(tp.id, tp.plane, region, tp.face_ids, count))
    return out


def render_depth(
    scene: Scene, pose: Pose, K: CameraIntrinsics, width: int | None = None, height: int | None = None
) -> tuple[DepthImage, GroundTruth]:
    width = width or K.width
    height = height or K.height
    if width is None or height is None:
        raise ValueError("image size required")
    boxes = scene.boxes()
    depth, face = raycast(boxes, pose, K, width, height)
    if not (face >= 0).any():
        raise EmptyViewError("no scene surface is visible from this pose")
    truth = visible_truth(exposed_faces(boxes), pose, K, width, height, face)
    return DepthImage(depth), GroundTruth(truth, [pose])


def merge_truth(frames: list[GroundTruth]) -> GroundTruth:
    """Union of the visible regions of each face over several frames."""
    by_id: dict[int, TruthPlane] = {}
    poses = []
    for gt in frames:
        poses.extend(gt.poses)
        for tp in gt.planes:
            if tp.id in by_id:
                cur = by_id[tp.id]
                cur.region = cur.region.union(tp.region)
                cur.pixel_count = max(cur.pixel_count, tp.pixel_count)
            else:
                by_id[tp.id] = TruthPlane(tp.id, tp.plane, tp.region, tp.face_ids, tp.pixel_count)
    return GroundTruth(sorted(by_id.values(), key=lambda p: p.id), poses)


# ---------------------------------------------------------------------------
# Noise and drift


@numba.njit(cache=True)
def _edge_jitter(src, dst, offs_v, offs_u, coin, jump):
    h, w = src.shape
    for i in range(h):
        for j in range(w):
            dst[i, j] = src[i, j]
            if not coin[i, j]:
                continue
            ii = i + offs_v[i, j]
            jj = j + offs_u[i, j]
            if ii < 0 or ii >= h or jj < 0 or jj >= w:
                continue
            a = src[i, j]
            b = src[ii, jj]
            if a > 0 and b > 0 and abs(a - b) > jump:
                dst[i, j] = b


def add_noise(img: DepthImage, spec: NoiseSpec, seed: int = 0, jump_mm: float = 20.0) -> DepthImage:
    """Seeded sensor noise: Gaussian, quantization, dropouts and depth-edge jitter."""
    if (
        spec.gaussian_sigma == 0
        and not spec.quantize_mm
        and spec.dropout_rate == 0
        and spec.edge_jitter_px == 0
    ):
        return img
    rng = np.random.default_rng(seed)
    data = img.as_float()
    valid = data > 0
    if spec.edge_jitter_px > 0:
        j = spec.edge_jitter_px
        offs_v = rng.integers(-j, j + 1, size=data.shape)
        offs_u = rng.integers(-j, j + 1, size=data.shape)
        coin = rng.random(data.shape) < 0.5
        out = np.empty_like(data)
        _edge_jitter(data, out, offs_v, offs_u, coin, jump_mm)
        data = out
    if spec.gaussian_sigma > 0:
        data = data + rng.normal(0.0, spec.gaussian_sigma, size=data.shape)
        # noise never creates or removes returns
        data = np.where(valid, np.maximum(data, 1.0), 0.0)
    if spec.quantize_mm:
        data = np.where(valid, np.maximum(np.rint(data), 1.0), 0.0)
    if spec.dropout_rate > 0:
        data = np.where(rng.random(data.shape) < spec.dropout_rate, 0.0, data)
    return DepthImage(data)


def drift_pose_sequence(true_poses, vertical_rate: float) -> list[Pose]:
    """Add ``i * vertical_rate`` millimeters of vertical offset to pose ``i``."""
    out = []
    for i, p in enumerate(true_poses):
        t = p.translation.copy()
        t[2] += i * vertical_rate / 1000.0
        out.append(Pose(t, p.rotation))
    return out

