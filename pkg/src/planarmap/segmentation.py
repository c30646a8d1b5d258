"""Planar-region segmentation of a normal image.

Canny edges on the normal image, then connected non-edge regions whose traced
outer boundaries are simplified with Douglas-Peucker into pixel polygons.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import ndimage
from shapely.geometry import Polygon
from shapely.validation import make_valid

from .normals import NormalImage


class DegenerateContourError(ValueError):
    pass


@dataclass(frozen=True)
class SegmentationParams:
    canny_low: float = 100.0
    canny_high: float = 250.0
    min_area: float = 300.0
    epsilon: float = 3.0
    dilate: int = 1
    # Outward offset (px) applied to the simplified outline; 0 keeps the
    # polygon on the boundary pixel centers.
    boundary_offset: float = 2.0

    def __post_init__(self):
        if not 0 < self.canny_low < self.canny_high:
            raise ValueError("need 0 < canny_low < canny_high")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.min_area > 0:
            raise ValueError("min_area must be positive")
        if self.dilate < 0 or self.boundary_offset < 0:
            raise ValueError("dilate and boundary_offset must be >= 0")


@dataclass(frozen=True)
class PixelPolygon:
    vertices: np.ndarray  # (N, 2) of (u, v), positive shoelace area
    holes: tuple = ()
    pixel_count: int = 0
    seed: tuple = (0, 0)  # (v, u) of the topmost-leftmost region pixel
    mask_slice: tuple | None = field(default=None, compare=False, repr=False)
    mask: np.ndarray | None = field(default=None, compare=False, repr=False)

    @property
    def area(self) -> float:
        a = signed_area(self.vertices)
        for h in self.holes:
            a -= abs(signed_area(h))
        return a

    def to_shapely(self) -> Polygon:
        return Polygon(self.vertices, [h for h in self.holes])


def signed_area(pts) -> float:
    pts = np.asarray(pts, dtype=np.float64)
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(x[:-1] @ y[1:] - x[1:] @ y[:-1] + x[-1] * y[0] - x[0] * y[-1])


# ---------------------------------------------------------------------------
# Canny


@numba.njit(parallel=True, cache=True)
def _edge_strength(chan, valid, mag, direc):
    """Max-over-channels Sobel magnitude and the quantized gradient direction."""
    h, w, nc = chan.shape
    for i in numba.prange(h):
        im = i - 1 if i > 0 else 0
        ip = i + 1 if i < h - 1 else h - 1
        for j in range(w):
            jm = j - 1 if j > 0 else 0
            jp = j + 1 if j < w - 1 else w - 1
            best = -1.0
            bgx = 0.0
            bgy = 0.0
            for c in range(nc):
                gx = (chan[im, jp, c] - chan[im, jm, c]) + 2.0 * (chan[i, jp, c] - chan[i, jm, c]) + (
                    chan[ip, jp, c] - chan[ip, jm, c]
                )
                gy = (chan[ip, jm, c] - chan[im, jm, c]) + 2.0 * (chan[ip, j, c] - chan[im, j, c]) + (
                    chan[ip, jp, c] - chan[im, jp, c]
                )
                m = math.sqrt(gx * gx + gy * gy)
                if m > best:
                    best = m
                    bgx = gx
                    bgy = gy
            mag[i, j] = best
            # 0: horizontal gradient, 1: 45 deg, 2: vertical, 3: 135 deg (v axis points down)
            ang = math.atan2(bgy, bgx)
            if ang < 0.0:
                ang += math.pi
            q = int(math.floor(ang / (math.pi / 4.0) + 0.5)) % 4
            direc[i, j] = q


@numba.njit(parallel=True, cache=True)
def _nms(mag, direc, out):
    h, w = mag.shape
    for i in numba.prange(h):
        for j in range(w):
            m = mag[i, j]
            q = direc[i, j]
            if q == 0:
                di, dj = 0, 1
            elif q == 1:
                di, dj = 1, 1
            elif q == 2:
                di, dj = 1, 0
            else:
                di, dj = 1, -1
            i1, j1 = i - di, j - dj
            i2, j2 = i + di, j + dj
            a = mag[i1, j1] if 0 <= i1 < h and 0 <= j1 < w else 0.0
            b = mag[i2, j2] if 0 <= i2 < h and 0 <= j2 < w else 0.0
            # strict on one side, non-strict on the other: plateaus keep one pixel
            out[i, j] = m if (m > a and m >= b) else 0.0


_EIGHT = np.ones((3, 3), dtype=bool)
_FOUR = ndimage.generate_binary_structure(2, 1)


def edge_strength(nimg: NormalImage) -> tuple[np.ndarray, np.ndarray]:
    """Edge strength on the 8-bit-scaled normal channels, plus quantized direction."""
    chan = np.ascontiguousarray((nimg.normals + 1.0) * 127.5)
    mag = np.empty(nimg.valid.shape, dtype=np.float64)
    direc = np.empty(nimg.valid.shape, dtype=np.int8)
    _edge_strength(chan, nimg.valid, mag, direc)
    return mag, direc


def detect_edges(nimg: NormalImage, params: SegmentationParams) -> np.ndarray:
    mag, direc = edge_strength(nimg)
    thin = np.empty_like(mag)
    _nms(mag, direc, thin)
    weak = thin >= params.canny_low
    strong = thin >= params.canny_high
    labels, n = ndimage.label(weak, structure=_EIGHT)
    keep = np.zeros(n + 1, dtype=bool)
    keep[np.unique(labels[strong])] = True
    keep[0] = False
    edges = keep[labels]
    edges |= ~nimg.valid
    return edges


# ---------------------------------------------------------------------------
# Contours

# Moore neighborhood, clockwise on screen (v down) starting west.
_DV = np.array([0, -1, -1, -1, 0, 1, 1, 1], dtype=np.int64)
_DU = np.array([-1, -1, 0, 1, 1, 1, 0, -1], dtype=np.int64)


@numba.njit(cache=True)
def _moore_trace(mask, sv, su, dv, du):
    """Outer boundary of the component containing (sv, su), its topmost-leftmost pixel."""
    h, w = mask.shape
    out_v = [sv]
    out_u = [su]
    cv, cu = sv, su
    back = 0  # direction from the current pixel to the backtrack pixel; start enters from the west
    first_v, first_u = -1, -1
    for _ in range(4 * h * w + 8):
        nv, nu, e = -1, -1, -1
        for k in range(1, 9):
            d = (back + k) % 8
            tv = cv + dv[d]
            tu = cu + du[d]
            if 0 <= tv < h and 0 <= tu < w and mask[tv, tu]:
                prev = (d + 7) % 8
                pv = cv + dv[prev] - tv
                pu = cu + du[prev] - tu
                for f in range(8):
                    if dv[f] == pv and du[f] == pu:
                        e = f
                        break
                nv, nu = tv, tu
                break
        if nv < 0:
            break  # isolated pixel
        if cv == sv and cu == su and first_v >= 0 and nv == first_v and nu == first_u:
            break  # the first move repeats: boundary closed
        if first_v < 0:
            first_v, first_u = nv, nu
        cv, cu, back = nv, nu, e
        out_v.append(cv)
        out_u.append(cu)
    if len(out_v) > 1 and out_v[-1] == sv and out_u[-1] == su:
        out_v.pop()
        out_u.pop()
    res = np.empty((len(out_v), 2), dtype=np.float64)
    for i in range(len(out_v)):
        res[i, 0] = out_u[i]
        res[i, 1] = out_v[i]
    return res


def trace_boundary(mask: np.ndarray) -> np.ndarray:
    """Moore-neighbor trace of the outer boundary of the (single) component in ``mask``.

    Returns (N, 2) pixel centers as (u, v).
    """
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise DegenerateContourError("empty mask")
    sv, su = divmod(int(idx[0]), mask.shape[1])
    return _moore_trace(mask, sv, su, _DV, _DU)


@numba.njit(cache=True)
def _segment_distance(px, py, ax, ay, bx, by):
    abx = bx - ax
    aby = by - ay
    L2 = abx * abx + aby * aby
    if L2 == 0.0:
        return math.hypot(px - ax, py - ay)
    t = ((px - ax) * abx + (py - ay) * aby) / L2
    t = min(max(t, 0.0), 1.0)
    return math.hypot(px - (ax + t * abx), py - (ay + t * aby))


@numba.njit(cache=True)
def _dp_open(pts, epsilon):
    n = pts.shape[0]
    keep = np.zeros(n, dtype=np.bool_)
    keep[0] = True
    keep[n - 1] = True
    stack = np.empty((n, 2), dtype=np.int64)
    top = 0
    stack[0, 0] = 0
    stack[0, 1] = n - 1
    top = 1
    while top > 0:
        top -= 1
        s = stack[top, 0]
        e = stack[top, 1]
        if e <= s + 1:
            continue
        best = -1.0
        k = -1
        for i in range(s + 1, e):
            d = _segment_distance(pts[i, 0], pts[i, 1], pts[s, 0], pts[s, 1], pts[e, 0], pts[e, 1])
            if d > best:
                best = d
                k = i
        if best > epsilon:
            keep[k] = True
            stack[top, 0] = s
            stack[top, 1] = k
            stack[top + 1, 0] = k
            stack[top + 1, 1] = e
            top += 2
    return np.flatnonzero(keep)


def douglas_peucker_closed(points, epsilon: float) -> np.ndarray:
    """Douglas-Peucker on a closed ring; returns the kept vertices (no repeated endpoint)."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 3:
        return pts.copy()
    # anchor the split at the first point and the point farthest from it
    far = int(np.argmax(np.hypot(pts[:, 0] - pts[0, 0], pts[:, 1] - pts[0, 1])))
    if far == 0:
        return pts[:1].copy()
    ring = np.ascontiguousarray(np.vstack([pts, pts[:1]]))
    first = _dp_open(ring[: far + 1], float(epsilon))
    second = _dp_open(ring[far:], float(epsilon)) + far
    idx = np.concatenate([first, second[1:-1]])
    return pts[idx]


def simplify_contour(points, epsilon: float) -> PixelPolygon:
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 3:
        raise DegenerateContourError("need at least 3 contour points")
    simp = douglas_peucker_closed(pts, epsilon)
    if len(simp) < 3:
        raise DegenerateContourError("simplified contour has fewer than 3 vertices")
    a = signed_area(simp)
    if abs(a) < 1e-12:
        raise DegenerateContourError("simplified contour has zero area")
    if a < 0:
        simp = simp[::-1].copy()
    return PixelPolygon(simp)


@numba.njit(cache=True)
def _scanline_fill(rings_u, rings_v, ring_starts, h, w, out):
    """Even-odd fill of pixel centers inside the rings."""
    nvert = rings_u.shape[0]
    vmin = h
    vmax = -1
    for k in range(nvert):
        vmin = min(vmin, int(math.ceil(rings_v[k])))
        vmax = max(vmax, int(math.floor(rings_v[k])))
    vmin = max(vmin, 0)
    vmax = min(vmax, h - 1)
    xs = np.empty(nvert)
    nr = ring_starts.shape[0] - 1
    for y in range(vmin, vmax + 1):
        yc = float(y)
        m = 0
        for r in range(nr):
            s = ring_starts[r]
            e = ring_starts[r + 1]
            for k in range(s, e):
                k2 = k + 1 if k + 1 < e else s
                y1 = rings_v[k]
                y2 = rings_v[k2]
                if (y1 <= yc < y2) or (y2 <= yc < y1):
                    x1 = rings_u[k]
                    x2 = rings_u[k2]
                    xs[m] = x1 + (yc - y1) * (x2 - x1) / (y2 - y1)
                    m += 1
        xs_s = np.sort(xs[:m])
        for p in range(0, m - 1, 2):
            a = max(int(math.ceil(xs_s[p])), 0)
            b = min(int(math.floor(xs_s[p + 1])), w - 1)
            for x in range(a, b + 1):
                out[y, x] = True


def fill_rings(rings, shape, origin=(0, 0)) -> np.ndarray:
    """Even-odd scanline fill of pixel centers; ``origin`` is the (u, v) of
    the output's top-left pixel."""
    rings = [np.asarray(r, dtype=np.float64) - np.asarray(origin, dtype=np.float64) for r in rings]
    out = np.zeros(shape, dtype=np.bool_)
    if not rings:
        return out
    starts = np.cumsum([0] + [len(r) for r in rings]).astype(np.int64)
    allp = np.vstack(rings)
    _scanline_fill(
        np.ascontiguousarray(allp[:, 0]), np.ascontiguousarray(allp[:, 1]), starts, shape[0], shape[1], out
    )
    return out


def _as_simple_ring(ring: np.ndarray) -> np.ndarray | None:
    """Repair a self-touching ring by keeping the largest valid piece."""
    poly = Polygon(ring)
    if poly.is_valid and poly.exterior.is_simple:
        return ring
    fixed = make_valid(poly)
    parts = [g for g in getattr(fixed, "geoms", [fixed]) if isinstance(g, Polygon) and g.area > 0]
    if not parts:
        return None
    best = max(parts, key=lambda g: g.area)
    return np.asarray(best.exterior.coords)[:-1]


def _offset_ring(ring: np.ndarray, dist: float, bounds) -> np.ndarray:
    poly = Polygon(ring).buffer(dist, join_style="mitre", mitre_limit=2.0)
    b = poly.bounds
    if b[0] < bounds[0] or b[1] < bounds[1] or b[2] > bounds[2] or b[3] > bounds[3]:
        poly = poly.intersection(Polygon([(bounds[0], bounds[1]), (bounds[2], bounds[1]),
                                          (bounds[2], bounds[3]), (bounds[0], bounds[3])]))
    if poly.geom_type != "Polygon":
        poly = max(getattr(poly, "geoms", []), key=lambda g: g.area, default=None)
        if poly is None:
            return ring
    out = np.asarray(poly.exterior.coords)[:-1]
    if signed_area(out) < 0:
        out = out[::-1]
    return out


def _ring_from_mask(mask: np.ndarray, epsilon: float, origin) -> np.ndarray | None:
    trace = trace_boundary(mask)
    trace += np.asarray(origin, dtype=np.float64)
    if len(trace) < 3:
        return None
    try:
        ring = simplify_contour(trace, epsilon).vertices
    except DegenerateContourError:
        return None
    ring = _as_simple_ring(ring)
    if ring is None or len(ring) < 3:
        return None
    if signed_area(ring) < 0:
        ring = ring[::-1].copy()
    return ring


def extract_regions(mask: np.ndarray, params: SegmentationParams) -> list[PixelPolygon]:
    """Pixel polygons for the connected non-edge regions of an edge mask."""
    edges = np.asarray(mask, dtype=bool)
    if params.dilate:
        edges = ndimage.binary_dilation(edges, structure=_EIGHT, iterations=params.dilate)
    labels, n = ndimage.label(~edges, structure=_FOUR)
    if n == 0:
        return []
    counts = np.bincount(labels.ravel(), minlength=n + 1)
    counts[0] = 0
    keep = np.flatnonzero(counts >= params.min_area)
    if keep.size == 0:
        return []
    # scipy numbers labels in raster order of their first pixel, which is the
    # topmost-leftmost tie-break.
    order = sorted(keep, key=lambda lab: (-counts[lab], lab))
    slices = ndimage.find_objects(labels)
    h, w = edges.shape
    bounds = (-0.5, -0.5, w - 0.5, h - 0.5)
    out = []
    for lab in order:
        sl = slices[lab - 1]
        region = labels[sl] == lab
        origin = (sl[1].start, sl[0].start)
        ring = _ring_from_mask(region, params.epsilon, origin)
        if ring is None:
            continue
        if params.boundary_offset > 0:
            ring = _offset_ring(ring, params.boundary_offset, bounds)
        # Holes are the non-region pixels inside the final outline. Edge
        # clutter can join an enclosed area to the outside through a narrow
        # channel, so a topological hole fill would miss it.
        holes = []
        hole_mask = fill_rings([ring], region.shape, origin) & ~region
        if hole_mask.any():
            hl, hn = ndimage.label(hole_mask, structure=_EIGHT)
            hcounts = np.bincount(hl.ravel(), minlength=hn + 1)
            # hole pixels sit one pixel beyond the region's boundary centers
            shrink = max(params.boundary_offset - 1.0, 0.0)
            for hlab in range(1, hn + 1):
                if hcounts[hlab] < params.min_area:
                    continue
                hring = _ring_from_mask(hl == hlab, params.epsilon, origin)
                if hring is None:
                    continue
                hring = hring[::-1].copy()
                holes.extend(_shrink_hole(hring, shrink) if shrink > 0 else [hring])
        flat = np.flatnonzero(region)
        rv, ru = divmod(int(flat[0]), region.shape[1])
        poly = PixelPolygon(
            vertices=ring,
            holes=tuple(holes),
            pixel_count=int(counts[lab]),
            seed=(rv + sl[0].start, ru + sl[1].start),
            mask_slice=sl,
            mask=region,
        )
        if poly.area <= 0:
            continue
        out.append(poly)
    return out


def _shrink_hole(hole: np.ndarray, dist: float) -> list[np.ndarray]:
    """Shrink a hole ring; thin necks may split it into several rings."""
    poly = Polygon(hole).buffer(-dist, join_style="mitre", mitre_limit=2.0)
    out = []
    for g in getattr(poly, "geoms", [poly]):
        if g.is_empty or g.geom_type != "Polygon" or g.area <= 0:
            continue
        r = np.asarray(g.exterior.coords)[:-1]
        if signed_area(r) > 0:
            r = r[::-1]
        out.append(r)
    return out


def segment(nimg: NormalImage, params: SegmentationParams) -> tuple[np.ndarray, list[PixelPolygon]]:
    edges = detect_edges(nimg, params)
    return edges, extract_regions(edges, params)
