"""Per-pixel surface normals from a (filtered) depth image.

Two modes:

* ``"gradient"``: ``normalize(-K^-1 [Gx, Gy, 1])`` with Sobel depth gradients
  in mm/px. Constant within a plane, but not a physical surface normal.
* ``"geometric"``: least-squares plane through the deprojected 3x3
  neighborhood, oriented toward the camera (``n_z < 0``). A normal is not
  defined across a depth discontinuity, so pixels whose neighborhood jumps
  by more than ``max_jump`` (relative to the center depth) are invalid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .imaging import CameraIntrinsics, DepthImage

MODES = ("gradient", "geometric")


@dataclass(frozen=True)
class NormalParams:
    mode: str = "gradient"
    max_jump: float | None = 0.03

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.max_jump is not None and not self.max_jump > 0:
            raise ValueError("max_jump must be positive")


@dataclass(frozen=True)
class NormalImage:
    normals: np.ndarray  # (H, W, 3), zero where invalid
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        if self.normals.shape[:2] != self.valid.shape or self.normals.shape[2] != 3:
            raise ValueError("normals must be (H, W, 3) matching the validity mask")
        self.normals.setflags(write=False)
        self.valid.setflags(write=False)

    @property
    def width(self) -> int:
        return self.valid.shape[1]

    @property
    def height(self) -> int:
        return self.valid.shape[0]

    def to_rgb8(self) -> np.ndarray:
        rgb = np.rint((self.normals + 1.0) / 2.0 * 255.0).astype(np.uint8)
        rgb[~self.valid] = 0
        return rgb


@numba.njit(parallel=True, cache=True)
def _sobel_kernel(img, gx, gy):
    h, w = img.shape
    for i in numba.prange(h):
        im = i - 1 if i > 0 else 0
        ip = i + 1 if i < h - 1 else h - 1
        for j in range(w):
            jm = j - 1 if j > 0 else 0
            jp = j + 1 if j < w - 1 else w - 1
            gx[i, j] = (
                (img[im, jp] - img[im, jm]) + 2.0 * (img[i, jp] - img[i, jm]) + (img[ip, jp] - img[ip, jm])
            ) * 0.125
            gy[i, j] = (
                (img[ip, jm] - img[im, jm]) + 2.0 * (img[ip, j] - img[im, j]) + (img[ip, jp] - img[im, jp])
            ) * 0.125


def sobel_gradients(img: DepthImage) -> tuple[np.ndarray, np.ndarray]:
    """Sobel depth gradients in mm/px (kernels scaled by 1/8, replicate border)."""
    data = np.ascontiguousarray(img.data, dtype=np.float64)
    gx = np.empty_like(data)
    gy = np.empty_like(data)
    _sobel_kernel(data, gx, gy)
    return gx, gy


@numba.njit(parallel=True, cache=True)
def _neighborhood_valid(depth, out):
    h, w = depth.shape
    for i in numba.prange(h):
        for j in range(w):
            ok = True
            for di in range(-1, 2):
                ii = i + di
                if ii < 0 or ii >= h:
                    continue
                for dj in range(-1, 2):
                    jj = j + dj
                    if jj < 0 or jj >= w:
                        continue
                    if depth[ii, jj] <= 0.0:
                        ok = False
            out[i, j] = ok


@numba.njit(parallel=True, cache=True)
def _gradient_kernel(gx, gy, valid, fx, fy, cx, cy, out):
    h, w = gx.shape
    for i in numba.prange(h):
        for j in range(w):
            if not valid[i, j]:
                out[i, j, 0] = 0.0
                out[i, j, 1] = 0.0
                out[i, j, 2] = 0.0
                continue
            nx = -(gx[i, j] - cx) / fx
            ny = -(gy[i, j] - cy) / fy
            nz = -1.0
            s = math.sqrt(nx * nx + ny * ny + nz * nz)
            out[i, j, 0] = nx / s
            out[i, j, 1] = ny / s
            out[i, j, 2] = nz / s


@numba.njit(cache=True)
def smallest_eigvec(a00, a01, a02, a11, a12, a22):
    """Unit eigenvector of the smallest eigenvalue of a symmetric 3x3 matrix."""
    p1 = a01 * a01 + a02 * a02 + a12 * a12
    q = (a00 + a11 + a22) / 3.0
    b00 = a00 - q
    b11 = a11 - q
    b22 = a22 - q
    p2 = b00 * b00 + b11 * b11 + b22 * b22 + 2.0 * p1
    if p2 <= 0.0:
        return 0.0, 0.0, 1.0
    p = math.sqrt(p2 / 6.0)
    det = (
        b00 * (b11 * b22 - a12 * a12)
        - a01 * (a01 * b22 - a12 * a02)
        + a02 * (a01 * a12 - b11 * a02)
    ) / (p * p * p)
    r = det / 2.0
    if r <= -1.0:
        phi = math.pi / 3.0
    elif r >= 1.0:
        phi = 0.0
    else:
        phi = math.acos(r) / 3.0
    lam = q + 2.0 * p * math.cos(phi + 2.0 * math.pi / 3.0)
    # rows of (A - lam I); the eigenvector is orthogonal to all of them
    r0x, r0y, r0z = a00 - lam, a01, a02
    r1x, r1y, r1z = a01, a11 - lam, a12
    r2x, r2y, r2z = a02, a12, a22 - lam
    c0x = r0y * r1z - r0z * r1y
    c0y = r0z * r1x - r0x * r1z
    c0z = r0x * r1y - r0y * r1x
    c1x = r0y * r2z - r0z * r2y
    c1y = r0z * r2x - r0x * r2z
    c1z = r0x * r2y - r0y * r2x
    c2x = r1y * r2z - r1z * r2y
    c2y = r1z * r2x - r1x * r2z
    c2z = r1x * r2y - r1y * r2x
    n0 = c0x * c0x + c0y * c0y + c0z * c0z
    n1 = c1x * c1x + c1y * c1y + c1z * c1z
    n2 = c2x * c2x + c2y * c2y + c2z * c2z
    if n0 >= n1 and n0 >= n2:
        vx, vy, vz, nn = c0x, c0y, c0z, n0
    elif n1 >= n2:
        vx, vy, vz, nn = c1x, c1y, c1z, n1
    else:
        vx, vy, vz, nn = c2x, c2y, c2z, n2
    if nn <= 0.0:
        return 0.0, 0.0, 1.0
    s = math.sqrt(nn)
    return vx / s, vy / s, vz / s


@numba.njit(parallel=True, cache=True)
def _geometric_kernel(depth, valid, xs, ys, out):
    h, w = depth.shape
    for i in numba.prange(h):
        for j in range(w):
            if not valid[i, j]:
                out[i, j, 0] = 0.0
                out[i, j, 1] = 0.0
                out[i, j, 2] = 0.0
                continue
            # Coordinates scaled by 1/z_center and taken relative to the
            # center point keep the single-pass covariance well conditioned.
            inv = 1.0 / depth[i, j]
            px = xs[j]
            py = ys[i]
            n = 0
            sx = 0.0
            sy = 0.0
            sz = 0.0
            sxx = 0.0
            sxy = 0.0
            sxz = 0.0
            syy = 0.0
            syz = 0.0
            szz = 0.0
            for ii in range(max(i - 1, 0), min(i + 2, h)):
                for jj in range(max(j - 1, 0), min(j + 2, w)):
                    z = depth[ii, jj] * inv
                    dx = xs[jj] * z - px
                    dy = ys[ii] * z - py
                    dz = z - 1.0
                    sx += dx
                    sy += dy
                    sz += dz
                    sxx += dx * dx
                    sxy += dx * dy
                    sxz += dx * dz
                    syy += dy * dy
                    syz += dy * dz
                    szz += dz * dz
                    n += 1
            mx = sx / n
            my = sy / n
            mz = sz / n
            vx, vy, vz = smallest_eigvec(
                sxx - n * mx * mx,
                sxy - n * mx * my,
                sxz - n * mx * mz,
                syy - n * my * my,
                syz - n * my * mz,
                szz - n * mz * mz,
            )
            if vz > 0.0:
                vx, vy, vz = -vx, -vy, -vz
            out[i, j, 0] = vx
            out[i, j, 1] = vy
            out[i, j, 2] = vz


@numba.njit(parallel=True, cache=True)
def _jump_free(depth, max_jump, out):
    h, w = depth.shape
    for i in numba.prange(h):
        for j in range(w):
            if not out[i, j]:
                continue
            lim = max_jump * depth[i, j]
            for di in range(-1, 2):
                ii = min(max(i + di, 0), h - 1)
                for dj in range(-1, 2):
                    jj = min(max(j + dj, 0), w - 1)
                    if abs(depth[ii, jj] - depth[i, j]) > lim:
                        out[i, j] = False


def neighborhood_valid(img: DepthImage) -> np.ndarray:
    out = np.empty(img.data.shape, dtype=np.bool_)
    _neighborhood_valid(np.ascontiguousarray(img.data, dtype=np.float64), out)
    return out


def compute_normals(
    img: DepthImage, K: CameraIntrinsics, mode: str = "gradient", max_jump: float | None = 0.03
) -> NormalImage:
    """Per-pixel unit normals; ``max_jump`` applies to the geometric mode only
    (``None`` disables the discontinuity test)."""
    if mode not in MODES:
        raise ValueError(f"unknown normal mode {mode!r}; expected one of {MODES}")
    if max_jump is not None and not max_jump > 0:
        raise ValueError("max_jump must be positive")
    depth = np.ascontiguousarray(img.data, dtype=np.float64)
    valid = np.empty(depth.shape, dtype=np.bool_)
    _neighborhood_valid(depth, valid)
    out = np.empty(depth.shape + (3,), dtype=np.float64)
    if mode == "gradient":
        gx, gy = sobel_gradients(img)
        _gradient_kernel(gx, gy, valid, K.fx, K.fy, K.cx, K.cy, out)
    else:
        if max_jump is not None:
            _jump_free(depth, max_jump, valid)
        xs = (np.arange(depth.shape[1]) - K.cx) / K.fx
        ys = (np.arange(depth.shape[0]) - K.cy) / K.fy
        _geometric_kernel(depth, valid, xs, ys, out)
    return NormalImage(out, valid)


def write_normal_png(path, nimg: NormalImage) -> None:
    from PIL import Image

    Image.fromarray(nimg.to_rgb8(), mode="RGB").save(path)
