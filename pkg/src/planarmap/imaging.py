"""Depth images, camera intrinsics, poses and the file formats that carry them.

Depth is stored in millimeters (0 = no return) and converted to meters only
when pixels are deprojected.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class InvalidDepthError(ValueError):
    pass


class ImageFormatError(ValueError):
    """Raised for malformed or unsupported depth/intrinsics files."""


@dataclass(frozen=True)
class DepthImage:
    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, copy=True)
        if arr.ndim != 2:
            raise ValueError("depth image must be 2-D")
        if arr.shape[0] < 3 or arr.shape[1] < 3:
            raise ValueError("depth image must be at least 3x3")
        if np.issubdtype(arr.dtype, np.floating):
            if not np.all(np.isfinite(arr)):
                raise ValueError("depth values must be finite")
        elif not np.issubdtype(arr.dtype, np.integer):
            raise ValueError(f"unsupported depth dtype {arr.dtype}")
        if np.any(arr < 0):
            raise ValueError("depth values must be >= 0")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def valid(self) -> np.ndarray:
        return self.data > 0

    def as_float(self) -> np.ndarray:
        return self.data.astype(np.float64)

    def to_uint16(self) -> np.ndarray:
        return np.clip(np.rint(self.data), 0, 65535).astype(np.uint16)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int | None = None
    height: int | None = None

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width is not None and not 0 < self.cx < self.width:
            raise ValueError("cx outside image")
        if self.height is not None and not 0 < self.cy < self.height:
            raise ValueError("cy outside image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def inverse(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def scaled(self, width: int, height: int) -> "CameraIntrinsics":
        """Same field of view at a different resolution."""
        if self.width is None or self.height is None:
            raise ValueError("intrinsics are not bound to an image size")
        sx, sy = width / self.width, height / self.height
        return CameraIntrinsics(
            self.fx * sx,
            self.fy * sy,
            (self.cx + 0.5) * sx - 0.5,
            (self.cy + 0.5) * sy - 0.5,
            width,
            height,
        )

    def ray_grid(self, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
        """Normalized image coordinates (x/z, y/z) for every pixel center."""
        u = np.arange(width, dtype=np.float64)
        v = np.arange(height, dtype=np.float64)
        xs = (u - self.cx) / self.fx
        ys = (v - self.cy) / self.fy
        return np.broadcast_to(xs[None, :], (height, width)), np.broadcast_to(ys[:, None], (height, width))


def _quat_to_matrix(q) -> np.ndarray:
    x, y, z, w = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def _matrix_to_quat(R: np.ndarray) -> np.ndarray:
    # Shepperd's method; picks the numerically largest pivot.
    tr = np.trace(R)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        w = 0.25 * s
        x = (R[2, 1] - R[1, 2]) / s
        y = (R[0, 2] - R[2, 0]) / s
        z = (R[1, 0] - R[0, 1]) / s
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        w = (R[2, 1] - R[1, 2]) / s
        x = 0.25 * s
        y = (R[0, 1] + R[1, 0]) / s
        z = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        w = (R[0, 2] - R[2, 0]) / s
        x = (R[0, 1] + R[1, 0]) / s
        y = 0.25 * s
        z = (R[1, 2] + R[2, 1]) / s
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        w = (R[1, 0] - R[0, 1]) / s
        x = (R[0, 2] + R[2, 0]) / s
        y = (R[1, 2] + R[2, 1]) / s
        z = 0.25 * s
    q = np.array([x, y, z, w])
    return q / np.linalg.norm(q)


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform. Quaternion order is (x, y, z, w)."""

    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))

    def __post_init__(self):
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        q = np.array(self.rotation, dtype=np.float64).reshape(4)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ValueError("rotation quaternion must have unit norm")
        t.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "rotation", q)

    @property
    def R(self) -> np.ndarray:
        return _quat_to_matrix(self.rotation)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, R, t) -> "Pose":
        return cls(np.asarray(t, dtype=np.float64), _matrix_to_quat(np.asarray(R, dtype=np.float64)))

    @classmethod
    def from_yaw(cls, yaw: float, t=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(np.asarray(t, dtype=np.float64), np.array([0.0, 0.0, math.sin(yaw / 2), math.cos(yaw / 2)]))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "Pose":
        """Camera at ``eye`` looking at ``target``; camera axes x right, y down, z forward."""
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, np.array([0.0, 1.0, 0.0]))
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        return cls.from_matrix(np.column_stack([x, y, z]), eye)

    def inverse(self) -> "Pose":
        R = self.R
        return Pose.from_matrix(R.T, -R.T @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """self * other: apply ``other`` first."""
        R = self.R
        return Pose.from_matrix(R @ other.R, R @ other.translation + self.translation)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        """Transform an (N, 3) or (3,) array of points."""
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.R.T + self.translation

    def to_record(self, t: float = 0.0) -> dict:
        tx, ty, tz = (float(v) for v in self.translation)
        qx, qy, qz, qw = (float(v) for v in self.rotation)
        return {"t": float(t), "tx": tx, "ty": ty, "tz": tz, "qx": qx, "qy": qy, "qz": qz, "qw": qw}

    @classmethod
    def from_record(cls, rec: dict) -> "Pose":
        q = np.array([rec["qx"], rec["qy"], rec["qz"], rec["qw"]], dtype=np.float64)
        # JSON round-off can push the norm slightly past 1e-9.
        q /= np.linalg.norm(q)
        return cls(np.array([rec["tx"], rec["ty"], rec["tz"]], dtype=np.float64), q)


def deproject_pixel(u: float, v: float, depth: float, K: CameraIntrinsics) -> np.ndarray:
    """Camera-frame point in meters for pixel (u, v) with depth in millimeters."""
    if depth <= 0:
        raise InvalidDepthError(f"invalid depth {depth} at pixel ({u}, {v})")
    z = depth / 1000.0
    return np.array([(u - K.cx) / K.fx * z, (v - K.cy) / K.fy * z, z])


def project_point(p, K: CameraIntrinsics) -> tuple[float, float]:
    x, y, z = p
    return K.fx * x / z + K.cx, K.fy * y / z + K.cy


def deproject_image(img: DepthImage, K: CameraIntrinsics) -> np.ndarray:
    """(H, W, 3) camera-frame points in meters; invalid pixels are zero."""
    xs, ys = K.ray_grid(img.width, img.height)
    z = img.as_float() / 1000.0
    return np.stack([xs * z, ys * z, z], axis=-1)


def transform_point(pose: Pose, p) -> np.ndarray:
    return pose.R @ np.asarray(p, dtype=np.float64) + pose.translation


# ---------------------------------------------------------------------------
# File formats


def read_pgm(path) -> DepthImage:
    raw = Path(path).read_bytes()
    m = re.match(rb"P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s", raw)
    if m is None:
        raise ImageFormatError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = (int(g) for g in m.groups())
    if w < 3 or h < 3 or not 0 < maxval <= 65535:
        raise ImageFormatError(f"{path}: bad PGM header {w}x{h} maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    body = raw[m.end():]
    need = w * h * dtype.itemsize
    if len(body) < need:
        raise ImageFormatError(f"{path}: truncated PGM data ({len(body)} < {need} bytes)")
    data = np.frombuffer(body[:need], dtype=dtype).reshape(h, w).astype(np.uint16)
    return DepthImage(data)


def write_pgm(path, img: DepthImage) -> None:
    data = img.to_uint16()
    header = f"P5\n{img.width} {img.height}\n65535\n".encode()
    Path(path).write_bytes(header + data.astype(">u2").tobytes())


def read_png16(path) -> DepthImage:
    from PIL import Image

    try:
        with Image.open(path) as im:
            arr = np.array(im)
    except Exception as exc:  # Pillow raises several unrelated types
        raise ImageFormatError(f"{path}: {exc}") from exc
    if arr.ndim != 2:
        raise ImageFormatError(f"{path}: expected single-channel depth PNG")
    return DepthImage(arr.astype(np.uint16))


def write_png16(path, img: DepthImage) -> None:
    from PIL import Image

    Image.fromarray(img.to_uint16()).save(path)


def read_depth(path) -> DepthImage:
    path = Path(path)
    if path.suffix.lower() == ".png":
        return read_png16(path)
    return read_pgm(path)


def write_depth(path, img: DepthImage) -> None:
    path = Path(path)
    if path.suffix.lower() == ".png":
        write_png16(path, img)
    else:
        write_pgm(path, img)


_INTRINSIC_KEYS = ("fx", "fy", "cx", "cy", "width", "height")


def read_intrinsics(path) -> CameraIntrinsics:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key = key.strip()
        if not sep or key not in _INTRINSIC_KEYS:
            raise ImageFormatError(f"{path}:{lineno}: expected one of {_INTRINSIC_KEYS} as key=value")
        try:
            values[key] = float(val)
        except ValueError as exc:
            raise ImageFormatError(f"{path}:{lineno}: {exc}") from exc
    missing = [k for k in ("fx", "fy", "cx", "cy") if k not in values]
    if missing:
        raise ImageFormatError(f"{path}: missing {missing}")
    for k in ("width", "height"):
        if k in values:
            values[k] = int(values[k])
    return CameraIntrinsics(**values)


def write_intrinsics(path, K: CameraIntrinsics) -> None:
    lines = [f"fx={K.fx!r}", f"fy={K.fy!r}", f"cx={K.cx!r}", f"cy={K.cy!r}"]
    if K.width is not None:
        lines.append(f"width={K.width}")
    if K.height is not None:
        lines.append(f"height={K.height}")
    Path(path).write_text("\n".join(lines) + "\n")
