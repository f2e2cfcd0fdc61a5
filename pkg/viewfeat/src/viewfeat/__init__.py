"""Offline multi-view surface feature extraction.

Produces the binary feature bank consumed by the acoustic renderer: runs a
pixel-aligned image backbone on calibrated views, projects surface basis
points into each view with ray-cast visibility, samples features, reduces
dimension with PCA, and writes the bank plus a JSON sidecar.
"""

from .bank import extract_bank, make_sidecar, write_bank
from .features import backbone_names, extract_feature_map, register_backbone
from .images import CalibratedImage, ImageError, load_cameras, load_image
from .pca import RankError, explained_variance, fit_pca, reduce_dim, transform
from .projection import (bilinear_sample, camera_center, project_and_sample,
                         project_points)
from .scene import Scene, SceneError, load_basis, load_scene, segments_clear

__version__ = "0.1.0"

__all__ = [
    "CalibratedImage", "ImageError", "RankError", "Scene", "SceneError",
    "backbone_names", "bilinear_sample", "camera_center", "explained_variance",
    "extract_bank", "extract_feature_map", "fit_pca", "load_basis",
    "load_cameras", "load_image", "load_scene", "make_sidecar",
    "project_and_sample", "project_points", "reduce_dim", "register_backbone",
    "segments_clear", "transform", "write_bank",
]
