"""Camera models and RGB-D lifting.

Two camera models are supported. A perspective camera records z-depth and is
described by pinhole intrinsics; a panoramic (equirectangular) camera records
the distance along the viewing ray. Both map a depth image to a point cloud in
the camera frame, one point per valid pixel, in row-major pixel order.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .cloud import PointCloud
from .errors import BoundsError, CameraError, ShapeError


class DepthSemantics(enum.IntEnum):
    Z_DEPTH = 0
    RAY_DISTANCE = 1


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (math.isfinite(self.cx) and math.isfinite(self.cy)):
            raise ValueError("principal point must be finite")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class PanoramicCamera:
    """Marker for an equirectangular camera; it carries no parameters."""


@dataclass
class DepthImage:
    width: int
    height: int
    values: np.ndarray
    semantics: DepthSemantics = DepthSemantics.Z_DEPTH

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.values.size != self.width * self.height:
            raise ShapeError(
                f"depth has {self.values.size} samples, expected {self.width}x{self.height}"
            )
        self.semantics = DepthSemantics(self.semantics)

    def valid_mask(self) -> np.ndarray:
        v = self.values
        return np.isfinite(v) & (v > 0)


@dataclass
class RgbdFrame:
    """An RGB image, its depth image and the camera that captured both.

    ``rgb`` is ``(height, width, 3)`` in [0, 1]. ``labels`` optionally holds a
    ground-truth class image (``-1`` where unknown); only synthetic frames have
    one. ``name`` identifies the frame for file-backed teachers.
    """

    rgb: np.ndarray
    depth: DepthImage
    camera: CameraIntrinsics | PanoramicCamera
    labels: np.ndarray | None = None
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        h, w = self.depth.height, self.depth.width
        if self.rgb.shape != (h, w, 3):
            raise ShapeError(f"rgb shape {self.rgb.shape} does not match depth {h}x{w}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(h, w)

    @property
    def width(self) -> int:
        return self.depth.width

    @property
    def height(self) -> int:
        return self.depth.height

    @property
    def is_panoramic(self) -> bool:
        return isinstance(self.camera, PanoramicCamera)


def pixel_centers(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Continuous (column, row) coordinates of every pixel center, row-major."""
    rows, cols = np.divmod(np.arange(width * height), width)
    return cols + 0.5, rows + 0.5


def unproject_perspective(u, v, d, K: CameraIntrinsics) -> np.ndarray:
    """``d * K^-1 (u, v, 1)^T`` for continuous image coordinates ``(u, v)``."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    x = d * (u - K.cx) / K.fx
    y = d * (v - K.cy) / K.fy
    return np.stack(np.broadcast_arrays(x, y, d), axis=-1)


def project_perspective(point, K: CameraIntrinsics) -> np.ndarray:
    """Project camera-frame point(s) to ``(u, v, d)``; the inverse of unprojection."""
    p = np.asarray(point, dtype=np.float64)
    z = p[..., 2]
    if np.any(~(z > 0)):
        raise CameraError("point is behind the camera (z <= 0)")
    u = K.fx * p[..., 0] / z + K.cx
    v = K.fy * p[..., 1] / z + K.cy
    return np.stack([u, v, z], axis=-1)


def pixel_to_uv(row, col, width: int, height: int):
    """Map pixel indices to panoramic angles (azimuth ``u``, elevation ``v``).

    ``u`` spans [-pi, pi] left to right and ``v`` spans [-pi/2, pi/2] top to
    bottom, both sampled at pixel centers.
    """
    row_a = np.asarray(row)
    col_a = np.asarray(col)
    if np.any((row_a < 0) | (row_a >= height)) or np.any((col_a < 0) | (col_a >= width)):
        raise BoundsError(f"pixel ({row}, {col}) outside {height}x{width} image")
    u = -math.pi + 2.0 * math.pi * (col_a + 0.5) / width
    v = -math.pi / 2 + math.pi * (row_a + 0.5) / height
    if u.ndim == 0:
        return float(u), float(v)
    return u, v


def uv_to_direction(u, v) -> np.ndarray:
    """Unit ray direction for panoramic angles; x forward, y left, z up."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return np.stack([np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), -np.sin(v)], axis=-1)


def unproject_panoramic(u, v, d) -> np.ndarray:
    return np.asarray(d, dtype=np.float64)[..., None] * uv_to_direction(u, v)


def _frame_cloud(frame: RgbdFrame, positions: np.ndarray, valid: np.ndarray) -> PointCloud:
    provenance = np.flatnonzero(valid)
    colors = frame.rgb.reshape(-1, 3)[provenance]
    return PointCloud(positions=positions, colors=colors, provenance=provenance)


def lift_perspective(frame: RgbdFrame) -> PointCloud:
    if frame.is_panoramic:
        raise CameraError("lift_perspective needs a perspective camera")
    if frame.depth.semantics != DepthSemantics.Z_DEPTH:
        raise CameraError("perspective lifting expects z-depth samples")
    valid = frame.depth.valid_mask()
    u, v = pixel_centers(frame.width, frame.height)
    pts = unproject_perspective(u[valid], v[valid], frame.depth.values[valid], frame.camera)
    return _frame_cloud(frame, pts.reshape(-1, 3), valid)


def lift_panoramic(frame: RgbdFrame) -> PointCloud:
    if not frame.is_panoramic:
        raise CameraError("lift_panoramic needs a panoramic camera")
    if frame.depth.semantics != DepthSemantics.RAY_DISTANCE:
        raise CameraError("panoramic lifting expects ray-distance samples")
    valid = frame.depth.valid_mask()
    idx = np.flatnonzero(valid)
    rows, cols = np.divmod(idx, frame.width)
    u, v = pixel_to_uv(rows, cols, frame.width, frame.height)
    pts = unproject_panoramic(u, v, frame.depth.values[idx])
    return _frame_cloud(frame, pts.reshape(-1, 3), valid)


def lift(frame: RgbdFrame) -> PointCloud:
    """Lift a frame with whichever model its camera uses."""
    return lift_panoramic(frame) if frame.is_panoramic else lift_perspective(frame)
