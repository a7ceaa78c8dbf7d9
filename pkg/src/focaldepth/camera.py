"""Pinhole camera model: projection, backprojection, point clouds.

Conventions: the camera looks down +z; pixel index u grows rightward and v
downward with pixel centers on the integer grid; the principal point
(cx, cy) is in pixel-index units. Depth is z-depth (distance along the
optical axis), not ray length. PixelCoord values are relative to the
principal point, so projection is simply x_s = fx * x_w / z_w.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ArgumentError, BehindCameraError, DimensionError
from .numerics import Plane2D

__all__ = [
    "CameraIntrinsics",
    "WorldPoint",
    "PixelCoord",
    "project",
    "pixel_index",
    "backproject",
    "backproject_array",
    "masked_pixel_indices",
    "export_ply",
    "deformation_ratio",
]


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ArgumentError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    def check_bound(self, height: int, width: int) -> "CameraIntrinsics":
        """Validate that the principal point lies inside an H×W image."""
        if not (0 <= self.cx < width and 0 <= self.cy < height):
            raise ArgumentError(
                f"principal point ({self.cx}, {self.cy}) outside {width}x{height} image"
            )
        return self


@dataclass(frozen=True)
class WorldPoint:
    x_w: float
    y_w: float
    z_w: float


@dataclass(frozen=True)
class PixelCoord:
    """Image-plane coordinates relative to the principal point, in pixels."""
    x_s: float
    y_s: float


def project(p: WorldPoint, cam: CameraIntrinsics) -> PixelCoord:
    """Project a world point; raises BehindCameraError for z_w <= 0."""
    if p.z_w <= 0:
        raise BehindCameraError(f"cannot project point with z_w={p.z_w}")
    return PixelCoord(cam.fx * p.x_w / p.z_w, cam.fy * p.y_w / p.z_w)


def pixel_index(coord: PixelCoord, cam: CameraIntrinsics) -> tuple:
    """(u, v) image indices for a principal-point-relative coordinate."""
    return (coord.x_s + cam.cx, coord.y_s + cam.cy)


def masked_pixel_indices(mask: Plane2D) -> tuple:
    """(v, u) index arrays of mask==1 pixels, row-major order."""
    return np.nonzero(mask.data == 1)


def backproject_array(depth: Plane2D, mask: Plane2D, cam: CameraIntrinsics) -> np.ndarray:
    """World points of masked pixels as an (N, 3) array, row-major order."""
    if depth.shape != mask.shape:
        raise DimensionError(f"depth {depth.shape} vs mask {mask.shape}")
    cam.check_bound(depth.height, depth.width)
    vs, us = masked_pixel_indices(mask)
    z = depth.data[vs, us]
    if np.any(z <= 0):
        raise ArgumentError("masked-in pixels must have positive depth")
    x = (us - cam.cx) * z / cam.fx
    y = (vs - cam.cy) * z / cam.fy
    return np.stack([x, y, z], axis=1)


def backproject(depth: Plane2D, mask: Plane2D, cam: CameraIntrinsics) -> list:
    """One WorldPoint per masked-in pixel (empty mask gives an empty list)."""
    pts = backproject_array(depth, mask, cam)
    return [WorldPoint(float(x), float(y), float(z)) for x, y, z in pts]


def _as_points_array(points) -> np.ndarray:
    if isinstance(points, np.ndarray):
        arr = np.asarray(points, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise DimensionError(f"point array must be (N,3), got {arr.shape}")
        return arr
    return np.array([[p.x_w, p.y_w, p.z_w] for p in points], dtype=np.float64).reshape(-1, 3)


def export_ply(points, colors: Optional[np.ndarray] = None, path=None) -> Path:
    """Write an ASCII PLY v1.0 point cloud; returns the path written.

    points: sequence of WorldPoint or an (N,3) array. colors, when given,
    is an (N,3) uint8 array matching the point count.
    """
    pts = _as_points_array(points)
    if colors is not None:
        colors = np.asarray(colors)
        if colors.shape != (pts.shape[0], 3):
            raise DimensionError(
                f"colors shape {colors.shape} does not match {pts.shape[0]} points"
            )
        colors = colors.astype(np.uint8)
    path = Path(path)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {pts.shape[0]}",
        "property double x",
        "property double y",
        "property double z",
    ]
    if colors is not None:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines.append("end_header")
    for i in range(pts.shape[0]):
        x, y, z = (float(v) for v in pts[i])
        row = f"{x!r} {y!r} {z!r}"  # repr round-trips float64 exactly
        if colors is not None:
            r, g, b = (int(v) for v in colors[i])
            row += f" {r} {g} {b}"
        lines.append(row)
    path.write_text("\n".join(lines) + "\n", encoding="ascii")
    return path


def deformation_ratio(cloud_a, cloud_b, min_lateral: float = 1e-9) -> float:
    """Median lateral stretch of cloud_b relative to cloud_a (matched points).

    For each corresponded pair the lateral extent is hypot(x, y); the ratio
    is extent_b / extent_a, and pairs whose reference extent is below
    min_lateral (on-axis points) are excluded. 1.0 means no deformation;
    values > 1 mean cloud_b is stretched sideways relative to cloud_a.
    """
    a = _as_points_array(cloud_a)
    b = _as_points_array(cloud_b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ArgumentError("deformation_ratio needs non-empty clouds")
    if a.shape[0] != b.shape[0]:
        raise ArgumentError(f"clouds must correspond pointwise: {a.shape[0]} vs {b.shape[0]}")
    ra = np.hypot(a[:, 0], a[:, 1])
    rb = np.hypot(b[:, 0], b[:, 1])
    keep = ra > min_lateral
    if not np.any(keep):
        raise ArgumentError("all reference points lie on the optical axis")
    return float(np.median(rb[keep] / ra[keep]))
