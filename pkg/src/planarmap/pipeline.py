"""Single-frame pipeline: diffusion, normals, segmentation, plane fitting."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .config import PipelineConfig
from .diffusion import diffuse
from .imaging import CameraIntrinsics, DepthImage
from .normals import NormalImage, compute_normals
from .parallel import workers
from .planefit import extract_plane_polygons
from .segmentation import segment

STAGES = ("diffusion", "normals", "segmentation", "ransac", "merge")


@dataclass
class FrameResult:
    polygons: list  # camera-frame PlanarPolygon
    pixel_polygons: list
    diagnostics: list
    filtered: DepthImage
    normals: NormalImage
    edges: np.ndarray
    timings: dict = field(default_factory=dict)  # ms per stage


def process_frame(depth: DepthImage, K: CameraIntrinsics, cfg: PipelineConfig | None = None) -> FrameResult:
    cfg = cfg or PipelineConfig()
    t = {}
    with workers(cfg.workers):
        t0 = time.perf_counter()
        filtered = diffuse(depth, cfg.diffusion)
        t1 = time.perf_counter()
        nimg = compute_normals(filtered, K, cfg.normals.mode, cfg.normals.max_jump)
        t2 = time.perf_counter()
        edges, pix = segment(nimg, cfg.segmentation)
        t3 = time.perf_counter()
        # planes are fit to the raw depth; diffusion only serves segmentation
        ext = extract_plane_polygons(depth, K, pix, cfg.ransac)
        t4 = time.perf_counter()
    t["diffusion"] = (t1 - t0) * 1e3
    t["normals"] = (t2 - t1) * 1e3
    t["segmentation"] = (t3 - t2) * 1e3
    t["ransac"] = (t4 - t3) * 1e3
    return FrameResult(ext.polygons, pix, ext.diagnostics, filtered, nimg, edges, t)
