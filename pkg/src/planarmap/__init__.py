"""Planar polygon extraction from depth images and drift-compensated
polygon mapping."""
import numba

# The default TBB layer warns on some installs; workqueue is always present
# and gives the same static scheduling for our prange kernels.
numba.config.THREADING_LAYER = "workqueue"

from .imaging import CameraIntrinsics, DepthImage, Pose  # noqa: E402
from .diffusion import DiffusionParams, diffuse  # noqa: E402
from .normals import NormalImage, compute_normals  # noqa: E402
from .segmentation import PixelPolygon, SegmentationParams, segment  # noqa: E402
from .planefit import PlanarPolygon, Plane, RansacParams, extract_plane_polygons, ransac_fit  # noqa: E402
from .mapman import DriftFilter, MapManager, MergeParams, PolygonMap, merge_frame  # noqa: E402

__all__ = [
    "CameraIntrinsics",
    "DepthImage",
    "Pose",
    "DiffusionParams",
    "diffuse",
    "NormalImage",
    "compute_normals",
    "PixelPolygon",
    "SegmentationParams",
    "segment",
    "PlanarPolygon",
    "Plane",
    "RansacParams",
    "extract_plane_polygons",
    "ransac_fit",
    "DriftFilter",
    "MapManager",
    "MergeParams",
    "PolygonMap",
    "merge_frame",
]
