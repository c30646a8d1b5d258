"""Report figures: stage timing curves and plan views of polygon maps."""
from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib as mpl  # noqa: E402
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import PathPatch  # noqa: E402
from matplotlib.path import Path as MplPath  # noqa: E402

GOLDEN = (math.sqrt(5) - 1.0) / 2.0
STAGE_COLORS = {
    "diffusion": "#1b9e77",
    "normals": "#d95f02",
    "segmentation": "#7570b3",
    "ransac": "#e7298a",
    "merge": "#66a61e",
}


def figsize(width_pt: float = 345.0, aspect: float = GOLDEN) -> tuple[float, float]:
    """Figure size in inches for a column ``width_pt`` points wide."""
    w = width_pt / 72.27
    return w, w * aspect


def set_style(font_size: int = 9):
    mpl.rcParams.update(
        {
            "font.size": font_size,
            "font.family": "serif",
            "axes.labelsize": font_size,
            "axes.titlesize": font_size,
            "legend.fontsize": font_size - 1,
            "xtick.labelsize": font_size - 1,
            "ytick.labelsize": font_size - 1,
            "axes.spines.top": False,
            "axes.spines.right": False,
            "lines.linewidth": 1.2,
            "savefig.dpi": 150,
            "savefig.bbox": "tight",
        }
    )


def plot_timings(rows, path) -> None:
    """Per-stage median time against pixel count, one line per stage."""
    set_style()
    rows = sorted(rows, key=lambda r: r.width * r.height)
    px = np.array([r.width * r.height for r in rows], dtype=float)
    fig, ax = plt.subplots(figsize=figsize())
    for stage, color in STAGE_COLORS.items():
        ax.plot(px / 1e3, [getattr(r, stage) for r in rows], "o-", color=color, label=stage, ms=3)
    ax.plot(px / 1e3, [r.total for r in rows], "k--", label="total", lw=1.0)
    ax.set_xlabel("pixels (thousands)")
    ax.set_ylabel("time per frame (ms)")
    ax.set_xticks(px / 1e3)
    ax.set_xticklabels([f"{r.width}x{r.height}" for r in rows])
    ax.legend(frameon=False, ncol=2)
    fig.savefig(path)
    plt.close(fig)


def _patch(vertices, holes, **kw) -> PathPatch:
    rings = [np.asarray(vertices)[:, :2]] + [np.asarray(h)[:, :2] for h in holes]
    verts = []
    codes = []
    for r in rings:
        verts.extend(r.tolist() + [r[0].tolist()])
        codes.extend([MplPath.MOVETO] + [MplPath.LINETO] * (len(r) - 1) + [MplPath.CLOSEPOLY])
    return PathPatch(MplPath(verts, codes), **kw)


def plot_map(polygons, path, truth=None, title: str | None = None) -> None:
    """Plan view of world polygons colored by centroid height."""
    set_style()
    polygons = list(polygons)
    fig, ax = plt.subplots(figsize=figsize(aspect=1.0))
    zs = [p.centroid[2] for p in polygons] or [0.0]
    norm = mpl.colors.Normalize(min(zs), max(max(zs), min(zs) + 1e-6))
    cmap = plt.get_cmap("viridis")
    pts = []
    for p in sorted(polygons, key=lambda q: q.centroid[2]):
        ax.add_patch(_patch(p.vertices, p.holes, fc=cmap(norm(p.centroid[2])), ec="k", lw=0.5, alpha=0.8))
        pts.append(p.vertices[:, :2])
    for t in truth or []:
        ax.add_patch(_patch(t.vertices, t.holes, fill=False, ec="r", lw=0.6, ls="--"))
        pts.append(t.vertices[:, :2])
    if pts:
        allp = np.vstack(pts)
        lo, hi = allp.min(axis=0), allp.max(axis=0)
        pad = 0.05 * max(hi - lo)
        ax.set_xlim(lo[0] - pad, hi[0] + pad)
        ax.set_ylim(lo[1] - pad, hi[1] + pad)
    ax.set_aspect("equal")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    if title:
        ax.set_title(title)
    fig.colorbar(mpl.cm.ScalarMappable(norm=norm, cmap=cmap), ax=ax, label="centroid z (m)", shrink=0.8)
    fig.savefig(path)
    plt.close(fig)
