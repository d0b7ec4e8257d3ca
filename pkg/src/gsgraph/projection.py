"""Point-footprint projector shared by training and association.

Stands in for Gaussian rasterization: every point with positive depth whose
projected centre falls inside the image stamps a disc of ``radius`` pixels,
centred on the nearest pixel to ``(u, v)``.
"""
from __future__ import annotations

import numpy as np

from . import kernels
from .model import CameraView

DEFAULT_RADIUS = 2


def pixel_centres(points, camera: CameraView) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rounded pixel column/row and depth; culled points get column -1."""
    u, v, z = camera.project(points)
    ok = np.isfinite(u) & np.isfinite(v) & (z > 0)
    px = np.full(u.shape, -1, dtype=np.int64)
    py = np.full(u.shape, -1, dtype=np.int64)
    # clip before the cast so far-off points cannot overflow int64
    px[ok] = np.floor(np.clip(u[ok], -1e9, 1e9) + 0.5).astype(np.int64)
    py[ok] = np.floor(np.clip(v[ok], -1e9, 1e9) + 0.5).astype(np.int64)
    z = np.where(ok, z, -1.0)
    return px, py, z


def render_index_map(points, camera: CameraView, radius: int = DEFAULT_RADIUS) -> np.ndarray:
    """H x W grid of the nearest point index covering each pixel (-1 = none)."""
    px, py, z = pixel_centres(points, camera)
    return kernels.rasterize_nearest(px, py, z, camera.height, camera.width, kernels.disc_offsets(radius))


def project_cluster(points, camera: CameraView, radius: int = DEFAULT_RADIUS) -> np.ndarray:
    """Binary footprint of ``points`` in ``camera`` (no occlusion test)."""
    px, py, z = pixel_centres(points, camera)
    return kernels.stamp_coverage(px, py, z, camera.height, camera.width, kernels.disc_offsets(radius))
