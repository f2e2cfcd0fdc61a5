"""Dense per-pixel feature extraction.

Backbones are pluggable through a registry keyed by name; the name used is
recorded in the bank sidecar.  The default "multiscale" backbone is a
deterministic hand-rolled encoder (Gaussian-smoothed color plus directional
gradient magnitudes at scales 1/2/4/8 px, 36 dims per pixel) — it requires
no downloaded weights and gives every pixel a feature aligned with the
image, which is all the downstream consumer needs.
"""

from __future__ import annotations

import logging

import numpy as np
from scipy.ndimage import gaussian_filter, sobel

log = logging.getLogger("viewfeat")

_BACKBONES: dict = {}
_SCALES = (1.0, 2.0, 4.0, 8.0)


def register_backbone(name):
    def deco(fn):
        _BACKBONES[name] = fn
        return fn
    return deco


def backbone_names():
    return sorted(_BACKBONES)


@register_backbone("multiscale")
def _multiscale(pixels: np.ndarray) -> np.ndarray:
    """(H, W, 3) image in [0, 1] -> (H, W, 36) feature grid."""
    chans = []
    for s in _SCALES:
        smooth = np.stack([gaussian_filter(pixels[:, :, c], s, mode="nearest")
                           for c in range(3)], axis=-1)
        gx = np.stack([np.abs(sobel(smooth[:, :, c], axis=1, mode="nearest"))
                       for c in range(3)], axis=-1)
        gy = np.stack([np.abs(sobel(smooth[:, :, c], axis=0, mode="nearest"))
                       for c in range(3)], axis=-1)
        chans.extend([smooth, gx, gy])
    return np.concatenate(chans, axis=-1)


def extract_feature_map(pixels, backbone: str = "multiscale") -> np.ndarray:
    """Pixel-aligned dense features, shape (H, W, D)."""
    if backbone not in _BACKBONES:
        raise ValueError(f"unknown backbone {backbone!r}; "
                         f"available: {backbone_names()}")
    pixels = np.asarray(pixels, dtype=np.float64)
    feat = _BACKBONES[backbone](pixels)
    norms = np.linalg.norm(feat, axis=-1)
    if not np.all(np.isfinite(feat)):
        raise ValueError("backbone produced non-finite features")
    log.info("feature map %sx%sx%s: norm min %.4g / median %.4g / max %.4g",
             *feat.shape, norms.min(), np.median(norms), norms.max())
    return feat
