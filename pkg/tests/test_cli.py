import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from planarmap import cli
from planarmap.imaging import DepthImage, Pose, read_depth, write_depth
from planarmap.mapman import map_from_json, polygon_from_json, to_world

DATA = Path(__file__).parent / "data"
SMALL = "camera:\n  width: 320\n  height: 240\n  frames: {frames}\n"


def run(*args):
    return cli.main([str(a) for a in args])


@pytest.fixture(scope="module")
def sweep(tmp_path_factory):
    """A drifted 50-frame 320x240 sequence written by the synth command."""
    root = tmp_path_factory.mktemp("sweep")
    cfg = root / "c.yaml"
    cfg.write_text(SMALL.format(frames=50))
    assert run("synth", root / "s", "--config", cfg, "--drift-mm", 2) == 0
    return root, cfg


def test_filter_roundtrip(tmp_path):
    out = tmp_path / "f.pgm"
    png = tmp_path / "n.png"
    code = run(
        "filter", DATA / "staircase_320x240.pgm", out, "--iters", 3, "--gamma", 0.2, "--k", 20,
        "--emit-normals", png, "--intrinsics", DATA / "intrinsics_320x240.txt",
    )
    assert code == 0 and png.exists()
    src = read_depth(DATA / "staircase_320x240.pgm")
    assert read_depth(out).data.shape == src.data.shape
    assert run("filter", DATA / "staircase_320x240.pgm", out, "--emit-normals", png) == cli.EXIT_CONFIG


def test_filter_errors(tmp_path):
    assert run("filter", tmp_path / "missing.pgm", tmp_path / "o.pgm") == cli.EXIT_IO
    bad = tmp_path / "bad.pgm"
    bad.write_bytes(b"P5\n10 10\n65535\n\x00")
    assert run("filter", bad, tmp_path / "o.pgm") == cli.EXIT_FORMAT


def test_extract_matches_golden(tmp_path):
    out = tmp_path / "e.json"
    cfg = tmp_path / "c.yaml"
    cfg.write_text(SMALL.format(frames=1))
    assert run("extract", DATA / "staircase_320x240.pgm", DATA / "intrinsics_320x240.txt", out, "--config", cfg) == 0
    got = json.loads(out.read_text())
    gold = json.loads((DATA / "extract_staircase_320x240.json").read_text())
    assert got["schema"] == 1 and got["frame"] == "camera"
    assert len(got["polygons"]) == len(gold["polygons"])
    for a, b in zip(got["polygons"], gold["polygons"]):
        assert np.allclose(a["normal"], b["normal"], atol=1e-9)
        assert np.allclose(a["centroid"], b["centroid"], atol=1e-9)
        assert a["area"] == pytest.approx(b["area"], rel=1e-9)
    assert [d["status"] for d in got["diagnostics"]] == [d["status"] for d in gold["diagnostics"]]


def test_extract_is_byte_deterministic(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for out in (a, b):
        assert run("extract", DATA / "staircase_320x240.pgm", DATA / "intrinsics_320x240.txt", out, "--seed", 3) == 0
    assert a.read_bytes() == b.read_bytes()


def test_extract_empty_scene(tmp_path):
    empty = tmp_path / "empty.pgm"
    write_depth(empty, DepthImage(np.zeros((240, 320), np.uint16)))
    out = tmp_path / "e.json"
    assert run("extract", empty, DATA / "intrinsics_320x240.txt", out) == 0
    assert json.loads(out.read_text())["polygons"] == []


def test_extract_corrupt_pgm(tmp_path):
    bad = tmp_path / "bad.pgm"
    bad.write_bytes(b"not an image")
    assert run("extract", bad, DATA / "intrinsics_320x240.txt", tmp_path / "e.json") == cli.EXIT_FORMAT


def test_config_errors(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("nonsense_block: {}\n")
    code = run("extract", DATA / "staircase_320x240.pgm", DATA / "intrinsics_320x240.txt", tmp_path / "e.json", "--config", cfg)
    assert code == cli.EXIT_CONFIG


def test_single_frame_map_equals_extract(tmp_path):
    frames = tmp_path / "frames"
    frames.mkdir()
    shutil.copy(DATA / "staircase_320x240.pgm", frames / "frame_0000.pgm")
    pose = Pose.look_at((0.0, -0.9, 1.45), (0.0, 0.55, 0.2))
    (tmp_path / "poses.jsonl").write_text(json.dumps(pose.to_record(0.0)) + "\n")
    assert run("map", frames, tmp_path / "poses.jsonl", DATA / "intrinsics_320x240.txt", tmp_path / "m") == 0
    pmap = map_from_json(json.loads((tmp_path / "m" / "map.json").read_text()))
    assert run("extract", frames / "frame_0000.pgm", DATA / "intrinsics_320x240.txt", tmp_path / "e.json") == 0
    ext = [to_world(polygon_from_json(r), pose) for r in json.loads((tmp_path / "e.json").read_text())["polygons"]]
    assert len(pmap.polygons) == len(ext)
    for a, b in zip(pmap.polygons, ext):
        assert np.allclose(a.vertices, b.vertices, atol=1e-9)
        assert np.allclose(a.plane.normal, b.plane.normal, atol=1e-9)
    assert (tmp_path / "m" / "map.ply").exists()
    reports = (tmp_path / "m" / "reports.jsonl").read_text().splitlines()
    assert len(reports) == 1 and json.loads(reports[0])["inserted"] == list(range(len(ext)))


def test_map_sweep_tread_count_and_drift(sweep, tmp_path, capsys):
    root, cfg = sweep
    s = root / "s"
    args = (s / "frames", s / "poses_drift.jsonl", s / "intrinsics.txt")
    assert run("map", *args, tmp_path / "on", "--config", cfg, "--truth", s / "truth.json") == 0
    on = capsys.readouterr().out
    assert run("map", *args, tmp_path / "off", "--config", cfg, "--truth", s / "truth.json", "--no-compensate") == 0
    off = capsys.readouterr().out
    spread = lambda text: float(text.split("height spread=")[1].split()[0])
    assert spread(on) < 5.0 < 50.0 < spread(off)
    pmap = map_from_json(json.loads((tmp_path / "on" / "map.json").read_text()))
    treads = [p for p in pmap.polygons if p.plane.normal[2] > 0.99 and p.centroid[2] > 0.05]
    assert len(treads) == 4
    assert len((tmp_path / "on" / "reports.jsonl").read_text().splitlines()) == 50


def test_map_byte_identical_reruns(sweep, tmp_path):
    root, cfg = sweep
    s = root / "s"
    frames = tmp_path / "frames"
    frames.mkdir()
    for f in sorted((s / "frames").iterdir())[:6]:
        shutil.copy(f, frames / f.name)
    for out in ("a", "b"):
        assert run("map", frames, s / "poses_drift.jsonl", s / "intrinsics.txt", tmp_path / out, "--config", cfg, "--seed", 5) == 0
    assert (tmp_path / "a" / "map.json").read_bytes() == (tmp_path / "b" / "map.json").read_bytes()


def test_map_skips_missing_poses(sweep, tmp_path):
    root, cfg = sweep
    s = root / "s"
    frames = tmp_path / "frames"
    frames.mkdir()
    names = sorted(p.name for p in (s / "frames").iterdir())[:20]
    for n in names:
        shutil.copy(s / "frames" / n, frames / n)
    recs = [json.loads(l) for l in (s / "poses.jsonl").read_text().splitlines()]
    keep = [r for r in recs if r["frame"] in names]
    # dropping 2 of 20 is within the 10% allowance, 3 is not
    (tmp_path / "p2.jsonl").write_text("\n".join(json.dumps(r) for r in keep[2:]) + "\n")
    (tmp_path / "p3.jsonl").write_text("\n".join(json.dumps(r) for r in keep[3:]) + "\n")
    assert run("map", frames, tmp_path / "p2.jsonl", s / "intrinsics.txt", tmp_path / "m2", "--config", cfg) == 0
    assert run("map", frames, tmp_path / "p3.jsonl", s / "intrinsics.txt", tmp_path / "m3", "--config", cfg) == cli.EXIT_SKIPPED


def test_map_rejects_bad_pose_records(sweep, tmp_path):
    root, cfg = sweep
    s = root / "s"
    (tmp_path / "p.jsonl").write_text('{"t": 0, "tx": 1}\n')
    assert run("map", s / "frames", tmp_path / "p.jsonl", s / "intrinsics.txt", tmp_path / "m") == cli.EXIT_FORMAT


def test_synth_outputs(sweep):
    root, _ = sweep
    s = root / "s"
    assert len(list((s / "frames").iterdir())) == 50
    truth = json.loads((s / "truth.json").read_text())
    assert truth["schema"] == 1 and len(truth["frames"]) == 50
    true_poses = [json.loads(l) for l in (s / "poses.jsonl").read_text().splitlines()]
    drift = [json.loads(l) for l in (s / "poses_drift.jsonl").read_text().splitlines()]
    assert drift[49]["tz"] - true_poses[49]["tz"] == pytest.approx(0.098)


def test_synth_is_byte_deterministic(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(SMALL.format(frames=2))
    for out in ("a", "b"):
        assert run("synth", tmp_path / out, "--config", cfg, "--noise-sigma", 3, "--dropout", 0.01, "--seed", 2) == 0
    for name in ("truth.json", "poses.jsonl", "frames/frame_0001.pgm"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_eval_and_asserts(sweep, tmp_path, capsys):
    root, cfg = sweep
    s = root / "s"
    m = tmp_path / "m"
    assert run("map", s / "frames", s / "poses_drift.jsonl", s / "intrinsics.txt", m, "--config", cfg) == 0
    capsys.readouterr()
    plot = tmp_path / "plan.png"
    metrics = tmp_path / "metrics.json"
    code = run("eval", m / "map.json", s / "truth.json", "--plot", plot, "--out", metrics, "--assert", "iou>=0.9,dd_mean<=5")
    assert code == 0 and plot.stat().st_size > 0
    printed = json.loads(capsys.readouterr().out.splitlines()[0])
    assert printed["iou"] >= 0.9
    assert json.loads(metrics.read_text())["schema"] == 1
    assert run("eval", m / "map.json", s / "truth.json", "--assert", "iou>=1.01") == cli.EXIT_ASSERT
    assert run("eval", m / "map.json", s / "truth.json", "--assert", "iou=>1") == cli.EXIT_CONFIG
    assert run("eval", m / "map.json", s / "truth.json", "--assert", "nope>=1") == cli.EXIT_CONFIG


def test_eval_schema_errors(tmp_path, sweep):
    root, _ = sweep
    bad = tmp_path / "m.json"
    bad.write_text('{"schema": 2, "polygons": []}')
    assert run("eval", bad, root / "s" / "truth.json") == cli.EXIT_SCHEMA
    bad.write_text('{"schema": 1}')
    assert run("eval", bad, root / "s" / "truth.json") == cli.EXIT_SCHEMA
    assert run("eval", DATA / "extract_staircase_320x240.json", root / "s" / "truth.json") == cli.EXIT_SCHEMA
    bad.write_text("{not json")
    assert run("eval", bad, root / "s" / "truth.json") == cli.EXIT_FORMAT


def test_bench_writes_csv_and_figure(tmp_path, capsys):
    csv_path = tmp_path / "t.csv"
    fig = tmp_path / "t.png"
    code = run("bench", "--resolutions", "160x120,320x240", "--repeats", 2, "--warmup", 0, "--csv", csv_path, "--plot", fig)
    assert code == 0 and fig.stat().st_size > 0
    lines = csv_path.read_text().splitlines()
    assert lines[0].startswith("width,height,polygon_count") and len(lines) == 3
    assert run("bench", "--resolutions", "160x120", "--repeats", 1, "--assert", "total<=0") == cli.EXIT_ASSERT
    assert run("bench", "--resolutions", "big") == cli.EXIT_CONFIG


def test_usage_error():
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == cli.EXIT_USAGE
