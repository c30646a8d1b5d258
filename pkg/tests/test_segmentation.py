import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from shapely.geometry import LinearRing, Point

from planarmap.config import PipelineConfig
from planarmap.normals import NormalImage, compute_normals
from planarmap.scenegen import exposed_faces
from planarmap.segmentation import (
    DegenerateContourError,
    SegmentationParams,
    detect_edges,
    extract_regions,
    fill_rings,
    segment,
    signed_area,
    simplify_contour,
    trace_boundary,
)
from scipy import ndimage


def normal_image(normals, valid=None):
    normals = np.asarray(normals, dtype=np.float64)
    if valid is None:
        valid = np.ones(normals.shape[:2], dtype=bool)
    return NormalImage(normals, valid)


def test_uniform_normals_no_edges():
    n = np.zeros((40, 50, 3))
    n[..., 2] = -1
    assert not detect_edges(normal_image(n), SegmentationParams()).any()


def test_perpendicular_halves_single_thin_edge():
    n = np.zeros((40, 50, 3))
    n[:, :25] = (0, 0, -1)
    n[:, 25:] = (-1, 0, 0)
    edges = detect_edges(normal_image(n), SegmentationParams())
    assert np.all(edges.sum(axis=1) == 1)
    cols = np.flatnonzero(edges.any(axis=0))
    assert set(cols) <= {24, 25}
    _, count = ndimage.label(edges, structure=np.ones((3, 3)))
    assert count == 1


def test_invalid_hole_is_edge():
    n = np.zeros((30, 30, 3))
    n[..., 2] = -1
    valid = np.ones((30, 30), bool)
    valid[10:15, 12:18] = False
    n[~valid] = 0
    edges = detect_edges(normal_image(n, valid), SegmentationParams())
    assert edges[10:15, 12:18].all()


def test_all_edge_mask_gives_nothing():
    assert extract_regions(np.ones((50, 50), bool), SegmentationParams()) == []


def test_edge_free_square_is_one_rectangle():
    polys = extract_regions(np.zeros((100, 100), bool), SegmentationParams(min_area=300))
    assert len(polys) == 1
    p = polys[0]
    assert len(p.vertices) == 4
    assert p.area == pytest.approx(100 * 100, rel=0.01)
    assert signed_area(p.vertices) > 0


def test_rectangle_simplifies_to_corners():
    mask = np.zeros((30, 40), bool)
    mask[5:20, 8:33] = True
    poly = simplify_contour(trace_boundary(mask), 2)
    corners = {(8, 5), (32, 5), (32, 19), (8, 19)}
    assert {tuple(map(int, v)) for v in poly.vertices} == corners


def test_circle_simplification():
    t = np.linspace(0, 2 * np.pi, int(2 * np.pi * 50), endpoint=False)
    pts = np.column_stack([100 + 50 * np.cos(t), 100 + 50 * np.sin(t)])
    poly = simplify_contour(pts, 1.0)
    assert len(poly.vertices) < 40
    ring = LinearRing(poly.vertices)
    assert max(ring.distance(Point(p)) for p in pts) <= 1.0 + 1e-9


def test_collinear_chain_is_degenerate():
    pts = np.column_stack([np.arange(20.0), np.zeros(20)])
    with pytest.raises(DegenerateContourError):
        simplify_contour(pts, 1.0)
    with pytest.raises(DegenerateContourError):
        simplify_contour(pts[:2], 1.0)


def test_small_hole_ignored_large_hole_kept():
    mask = np.zeros((120, 120), bool)
    mask[10:14, 10:14] = True  # 16 px hole
    mask[50:80, 50:80] = True  # 900 px hole
    polys = extract_regions(mask, SegmentationParams(min_area=300, boundary_offset=0))
    outer = polys[0]
    assert len(outer.holes) == 1
    assert signed_area(outer.holes[0]) < 0


def test_staircase_region_count(staircase_frame):
    depth, gt, K, _ = staircase_frame
    cfg = PipelineConfig()
    from planarmap.diffusion import diffuse

    nimg = compute_normals(diffuse(depth, cfg.diffusion), K, cfg.normals.mode, cfg.normals.max_jump)
    _, polys = segment(nimg, cfg.segmentation)
    truth = [p for p in gt.planes if p.pixel_count >= cfg.segmentation.min_area]
    assert len(polys) == len(truth) == 9


def test_fill_rings_matches_shapely():
    ring = np.array([[2.0, 1.0], [15.0, 3.0], [12.0, 14.0], [7.0, 9.0], [1.0, 12.0]])
    filled = fill_rings([ring], (16, 18))
    from shapely.geometry import Polygon

    poly = Polygon(ring)
    for v in range(16):
        for u in range(18):
            p = Point(u, v)
            if poly.exterior.distance(p) > 1e-9:
                assert filled[v, u] == poly.contains(p)


def closed_contours():
    """Star-shaped random contours sampled densely."""
    return st.tuples(
        st.lists(st.floats(5, 60), min_size=3, max_size=24),
        st.integers(40, 400),
        st.floats(0.2, 6.0),
    )


@given(closed_contours())
def test_douglas_peucker_deviation_bound(spec):
    radii, n, eps = spec
    ang = np.linspace(0, 2 * np.pi, len(radii), endpoint=False)
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    r = np.interp(t, np.append(ang, 2 * np.pi), np.append(radii, radii[0]))
    pts = np.column_stack([r * np.cos(t), r * np.sin(t)])
    try:
        poly = simplify_contour(pts, eps)
    except DegenerateContourError:
        return
    ring = LinearRing(poly.vertices)
    dev = max(ring.distance(Point(p)) for p in pts)
    assert dev <= eps + 1e-9
    assert signed_area(poly.vertices) > 0
    # every output vertex is an input point
    assert all((np.abs(pts - v).sum(axis=1) == 0).any() for v in poly.vertices)


masks = st.lists(
    st.tuples(st.integers(0, 47), st.integers(0, 47), st.integers(1, 30), st.integers(1, 30)),
    min_size=0,
    max_size=6,
)


@given(rects=masks, offset=st.sampled_from([0.0, 2.0]))
def test_region_invariants(rects, offset):
    edges = np.zeros((48, 48), bool)
    edges[:, 0] = edges[:, -1] = False
    for v, u, h, w in rects:
        edges[v : v + h, u : u + 1] = True
        edges[v : v + 1, u : u + w] = True
    params = SegmentationParams(min_area=40, boundary_offset=offset)
    polys = extract_regions(edges, params)
    seen = np.zeros(edges.shape, bool)
    counts = []
    for p in polys:
        assert signed_area(p.vertices) > 0
        assert all(signed_area(h) < 0 for h in p.holes)
        assert p.pixel_count >= params.min_area
        full = np.zeros(edges.shape, bool)
        full[p.mask_slice] = p.mask
        assert not (seen & full).any()
        seen |= full
        counts.append((-p.pixel_count, p.seed))
    assert counts == sorted(counts)
