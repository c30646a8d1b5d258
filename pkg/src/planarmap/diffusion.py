"""Edge-preserving smoothing of depth images (Perona-Malik, exponential conductance).

Each iteration reads only the previous buffer, so the update is a pure
per-pixel map. Zero-depth pixels are holes: they are never updated and their
neighbors drop them from the 4-neighbor stencil.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .imaging import DepthImage


@dataclass(frozen=True)
class DiffusionParams:
    gamma: float = 0.15
    k: float = 30.0
    iterations: int = 10

    def __post_init__(self):
        if not 0 < self.gamma <= 0.25:
            raise ValueError("gamma must be in (0, 0.25]")
        if not self.k > 0:
            raise ValueError("k must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


def diffusion_coefficient(grad_mag, k: float):
    """Conductance exp(-(|grad I| / k)^2)."""
    return np.exp(-((np.asarray(grad_mag, dtype=np.float64) / k) ** 2))


@numba.njit(parallel=True, cache=True)
def _step_kernel(src, dst, gamma, k):
    h, w = src.shape
    inv_k2 = 1.0 / (k * k)
    for i in numba.prange(h):
        # out-of-bounds neighbors replicate the center (zero flux)
        im = i - 1 if i > 0 else 0
        ip = i + 1 if i < h - 1 else h - 1
        for j in range(w):
            c0 = src[i, j]
            jm = j - 1 if j > 0 else 0
            jp = j + 1 if j < w - 1 else w - 1
            up = src[im, j]
            dn = src[ip, j]
            lf = src[i, jm]
            rt = src[i, jp]
            # hole neighbors are dropped from the stencil; the Laplacian is
            # rescaled to the remaining neighbor count
            n = (up != 0.0) + (dn != 0.0) + (lf != 0.0) + (rt != 0.0)
            up = up if up != 0.0 else c0
            dn = dn if dn != 0.0 else c0
            lf = lf if lf != 0.0 else c0
            rt = rt if rt != 0.0 else c0
            lap = (up - c0) + (dn - c0) + (lf - c0) + (rt - c0)
            gx = 0.5 * (rt - lf)
            gy = 0.5 * (dn - up)
            c = math.exp(-(gx * gx + gy * gy) * inv_k2)
            v = c0 + gamma * c * lap * 4.0 / max(n, 1)
            dst[i, j] = v if c0 != 0.0 else 0.0


def _run(data: np.ndarray, params: DiffusionParams, iterations: int) -> np.ndarray:
    a = np.ascontiguousarray(data, dtype=np.float64).copy()
    b = np.empty_like(a)
    for _ in range(iterations):
        _step_kernel(a, b, params.gamma, params.k)
        a, b = b, a
    return a


def diffuse_step(img: DepthImage, params: DiffusionParams) -> DepthImage:
    return DepthImage(_run(img.data, params, 1))


def diffuse(img: DepthImage, params: DiffusionParams) -> DepthImage:
    if params.iterations == 0:
        return img
    return DepthImage(_run(img.data, params, params.iterations))
