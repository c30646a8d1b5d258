import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from planarmap.config import PipelineConfig
from planarmap.evalbench import (
    CSV_FIELDS,
    NoMatchesError,
    StageTimings,
    bench_pipeline,
    evaluate,
    height_errors,
    height_spread,
    iou,
    normal_angle_stats,
    timings_csv,
    truth_polygons,
)
from planarmap.planefit import Plane, PlanarPolygon
from planarmap.scenegen import Scene


def rect(x0, y0, x1, y1, z=0.3, normal=(0, 0, 1.0)):
    verts = np.array([[x0, y0, z], [x1, y0, z], [x1, y1, z], [x0, y1, z]], dtype=float)
    return PlanarPolygon(verts, Plane.from_point_normal(verts[0], normal), frame="world")


def tilted(deg):
    a = math.radians(deg)
    return PlanarPolygon(
        np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], float),
        Plane(np.array([0.0, math.sin(a), math.cos(a)]), 0.0),
        frame="world",
    )


def test_iou_identical():
    t = [rect(0, 0, 1, 1), rect(0, 1, 1, 2, 0.45)]
    assert iou(t, t) == pytest.approx(1.0)


def test_iou_disjoint():
    assert iou([rect(5, 5, 6, 6)], [rect(0, 0, 1, 1)]) == 0.0


def test_iou_half_overlap():
    assert iou([rect(0.5, 0, 1.5, 1)], [rect(0, 0, 1, 1)]) == pytest.approx(1 / 3)


def test_iou_unmatched_plane_counts_in_union():
    # extracted plane 10 cm above truth is unmatched
    assert iou([rect(0, 0, 1, 1, 0.4)], [rect(0, 0, 1, 1, 0.3)]) == 0.0


boxes = st.tuples(st.floats(-2, 2), st.floats(-2, 2), st.floats(0.05, 2), st.floats(0.05, 2))


@given(a=boxes, b=boxes)
def test_iou_symmetric(a, b):
    pa = rect(a[0], a[1], a[0] + a[2], a[1] + a[3])
    pb = rect(b[0], b[1], b[0] + b[2], b[1] + b[3])
    x, y = iou([pa], [pb]), iou([pb], [pa])
    assert x == pytest.approx(y, abs=1e-12)
    assert 0.0 <= x <= 1.0
    sym = pa.footprint().symmetric_difference(pb.footprint()).area
    assert (x == pytest.approx(1.0, abs=1e-12)) == (sym < 1e-12)


def test_angle_stats():
    assert normal_angle_stats([rect(0, 0, 1, 1)] * 3) == (0.0, 0.0)
    m, s = normal_angle_stats([tilted(2), tilted(4)])
    assert m == pytest.approx(3.0) and s == pytest.approx(1.0)
    with pytest.raises(ValueError):
        normal_angle_stats([])


def test_height_errors():
    truth = [rect(0, 0, 1, 1, 0.15), rect(0, 1, 1, 2, 0.30)]
    assert height_errors(truth, truth) == (0.0, 0.0)
    planes = [rect(0, 0, 1, 1, 0.151), rect(0, 1, 1, 2, 0.303)]
    m, s = height_errors(planes, truth)
    assert m == pytest.approx(2.0) and s == pytest.approx(1.0)
    with pytest.raises(NoMatchesError):
        height_errors([rect(0, 0, 1, 1, 1.0)], truth)


def test_evaluate_truth_against_itself(staircase_frame):
    _, gt, _, _ = staircase_frame
    truth = truth_polygons(gt, 300)
    m = evaluate(truth, gt)
    assert m.iou == pytest.approx(1.0) and m.alpha_mean == pytest.approx(0.0, abs=1e-9)
    assert m.dd_mean == pytest.approx(0.0, abs=1e-9)


def test_height_spread_pairs_by_plan_view(staircase_frame):
    _, gt, _, _ = staircase_frame
    truth = [p for p in truth_polygons(gt, 300) if p.plane.normal[2] > 0.99]
    from planarmap.mapman import shift_z

    assert height_spread(truth, gt) == pytest.approx(0.0, abs=1e-9)
    # a drift of most of a step still pairs each tread with itself
    assert height_spread([shift_z(p, 0.1) for p in truth], gt) == pytest.approx(100.0)


def test_stage_timings_totals():
    t = StageTimings(320, 240, 9, 1.0, 2.0, 3.0, 4.0, 5.0)
    assert t.total == 15.0 and t.per_pixel == 6.0


def test_bench_harness_contract():
    cfg = PipelineConfig()
    rows = bench_pipeline(Scene(), resolutions=((160, 120), (320, 240)), repeats=5, warmup=1, cfg=cfg)
    assert [(r.width, r.height) for r in rows] == [(160, 120), (320, 240)]
    assert all(r.polygon_count > 0 for r in rows)
    for r in rows:
        for f in ("diffusion", "normals", "segmentation", "ransac", "merge"):
            assert getattr(r, f) >= 0
    text = timings_csv(rows)
    parsed = list(csv.DictReader(io.StringIO(text)))
    assert tuple(parsed[0]) == CSV_FIELDS and len(parsed) == 2
    again = bench_pipeline(Scene(), resolutions=((160, 120),), repeats=2, warmup=0, cfg=cfg)
    assert again[0].polygon_count == rows[0].polygon_count
    with pytest.raises(ValueError):
        bench_pipeline(Scene(), resolutions=((160, 120),), repeats=0)
