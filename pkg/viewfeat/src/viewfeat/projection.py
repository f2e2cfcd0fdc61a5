"""Project 3D points into calibrated views and sample pixel-aligned features.

A point is visible in a view iff it sits in front of the camera, its
projection lands inside the frame, and the segment from the camera center
to the point is unobstructed by the scene mesh.  Hidden points get a zero
feature and a False flag.
"""

from __future__ import annotations

import numpy as np

from .images import CalibratedImage
from .scene import Scene, segments_clear

Z_EPS = 1e-9


def camera_center(extrinsics: np.ndarray) -> np.ndarray:
    """World-space optical center of a 3x4 world->camera matrix [R | t]."""
    r, t = extrinsics[:, :3], extrinsics[:, 3]
    return -r.T @ t


def project_points(points, image: CalibratedImage):
    """Pixel coordinates (u, v) and camera-frame depth z for (N, 3) points."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    cam = pts @ image.extrinsics[:, :3].T + image.extrinsics[:, 3]
    hom = cam @ image.intrinsics.T
    z = cam[:, 2]
    denom = np.where(np.abs(hom[:, 2]) > Z_EPS, hom[:, 2], 1.0)
    uv = hom[:, :2] / denom[:, None]
    return uv, z


def bilinear_sample(grid: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Sample an (H, W, D) grid at (N, 2) pixel coordinates (u=col, v=row)."""
    h, w = grid.shape[:2]
    u = np.clip(uv[:, 0], 0.0, w - 1.0)
    v = np.clip(uv[:, 1], 0.0, h - 1.0)
    u0 = np.clip(np.floor(u).astype(int), 0, w - 2) if w > 1 else np.zeros(len(u), int)
    v0 = np.clip(np.floor(v).astype(int), 0, h - 2) if h > 1 else np.zeros(len(v), int)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = (u - u0)[:, None]
    fv = (v - v0)[:, None]
    return ((1 - fv) * ((1 - fu) * grid[v0, u0] + fu * grid[v0, u1])
            + fv * ((1 - fu) * grid[v1, u0] + fu * grid[v1, u1]))


def project_and_sample(points, image: CalibratedImage, scene: Scene,
                       feature_map: np.ndarray):
    """Per-point features and visibility for one view.

    Returns (features (N, D), visible (N,) bool); hidden rows are zero.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    uv, z = project_points(pts, image)
    h, w = image.shape
    in_frame = ((z > Z_EPS)
                & (uv[:, 0] >= 0.0) & (uv[:, 0] <= w - 1.0)
                & (uv[:, 1] >= 0.0) & (uv[:, 1] <= h - 1.0))
    visible = in_frame.copy()
    if visible.any():
        center = camera_center(image.extrinsics)
        visible[in_frame] = segments_clear(scene, center, pts[in_frame])
    feats = np.zeros((len(pts), feature_map.shape[2]))
    if visible.any():
        feats[visible] = bilinear_sample(feature_map, uv[visible])
    return feats, visible
