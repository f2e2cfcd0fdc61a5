"""Build and serialize the multi-view surface feature bank.

Binary layout (little-endian): magic "AVDF", u32 version=1, u32 N_s,
u32 N_c, u32 D_v; N_c extrinsics as 12 float32; row-major float32 features
[N_s x N_c x D_v]; packed visibility bits [N_s x N_c].  A JSON sidecar at
<out>.json records the backbone name and the PCA projection so the reduced
features can be reproduced.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .features import extract_feature_map
from .images import CalibratedImage
from .pca import fit_pca, transform
from .projection import project_and_sample
from .scene import Scene

MAGIC = b"AVDF"
VERSION = 1


def extract_bank(scene: Scene, basis_points, cameras: list[CalibratedImage],
                 dim: int, backbone: str = "multiscale"):
    """Full extraction pipeline.

    Per view: dense feature map, projection + visibility of every basis
    point, bilinear feature sampling.  PCA is fit on the pooled visible
    samples and applied everywhere; hidden rows are zeroed after projection
    so the written file carries exact zeros for hidden (point, view) pairs.

    Returns (features (N_s, N_c, dim) float32, visible (N_s, N_c) bool,
    extrinsics (N_c, 12) float32, components, mean).
    """
    pts = np.atleast_2d(np.asarray(basis_points, dtype=np.float64))
    n_s, n_c = len(pts), len(cameras)
    raw_cols, vis_cols = [], []
    for cam in cameras:
        fmap = extract_feature_map(cam.pixels, backbone)
        f, v = project_and_sample(pts, cam, scene, fmap)
        raw_cols.append(f)
        vis_cols.append(v)
    raw = np.stack(raw_cols, axis=1)       # (N_s, N_c, D_raw)
    visible = np.stack(vis_cols, axis=1)   # (N_s, N_c)
    if not visible.any():
        raise ValueError("no basis point is visible in any view")
    comp, mean = fit_pca(raw[visible], dim)
    reduced = transform(raw.reshape(-1, raw.shape[2]), comp, mean)
    reduced = reduced.reshape(n_s, n_c, dim)
    reduced[~visible] = 0.0
    ext = np.stack([cam.extrinsics.reshape(12) for cam in cameras])
    return (reduced.astype(np.float32), visible,
            ext.astype(np.float32), comp, mean)


def write_bank(path, features, visible, extrinsics, sidecar: dict | None = None):
    """Write the binary bank (and JSON sidecar when metadata is given)."""
    feat = np.ascontiguousarray(features, dtype="<f4")
    vis = np.asarray(visible, dtype=bool)
    ext = np.ascontiguousarray(extrinsics, dtype="<f4")
    n_s, n_c, d_v = feat.shape
    if vis.shape != (n_s, n_c) or ext.shape != (n_c, 12):
        raise ValueError("inconsistent bank tensor shapes")
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IIII", VERSION, n_s, n_c, d_v))
        f.write(ext.tobytes())
        f.write(feat.tobytes())
        f.write(np.packbits(vis.reshape(-1)).tobytes())
    if sidecar is not None:
        with open(path.with_suffix(path.suffix + ".json"), "w") as f:
            json.dump(sidecar, f, indent=1)


def make_sidecar(backbone: str, components: np.ndarray, mean: np.ndarray,
                 basis_path=None) -> dict:
    return {
        "format": "AVDF",
        "version": VERSION,
        "backbone": backbone,
        "projection": np.asarray(components, dtype=float).tolist(),
        "projection_mean": np.asarray(mean, dtype=float).tolist(),
        "basis": None if basis_path is None else str(basis_path),
    }
