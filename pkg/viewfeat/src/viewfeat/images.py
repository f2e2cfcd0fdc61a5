"""Calibrated image loading.

Cameras JSON: a list of {"file": name, "K": 9 floats (row-major 3x3
intrinsics), "P": 12 floats (row-major 3x4 world->camera extrinsics)};
image files are resolved relative to the images directory and read with
Pillow (any common raster format) or numpy (.npy arrays).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


class ImageError(ValueError):
    pass


@dataclass(frozen=True)
class CalibratedImage:
    pixels: np.ndarray      # (H, W, 3) float in [0, 1]
    intrinsics: np.ndarray  # (3, 3)
    extrinsics: np.ndarray  # (3, 4) world -> camera

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        k = np.asarray(self.intrinsics, dtype=np.float64)
        p = np.asarray(self.extrinsics, dtype=np.float64)
        if px.ndim == 2:
            px = np.repeat(px[:, :, None], 3, axis=2)
        if px.ndim != 3 or px.shape[2] != 3 or px.size == 0:
            raise ImageError("pixels must be a nonempty (H, W, 3) array")
        if k.shape != (3, 3):
            raise ImageError("intrinsics must be 3x3")
        if abs(np.linalg.det(k)) < 1e-12:
            raise ImageError("intrinsics must be invertible")
        if p.shape != (3, 4):
            raise ImageError("extrinsics must be 3x4")
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "intrinsics", k)
        object.__setattr__(self, "extrinsics", p)

    @property
    def shape(self):
        return self.pixels.shape[:2]


def load_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.asarray(np.load(path), dtype=np.float64)
    else:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.ndim != 3 or arr.size == 0:
        raise ImageError(f"{path}: not a usable image")
    return np.clip(arr[:, :, :3], 0.0, 1.0)


def load_cameras(cameras_json, images_dir) -> list[CalibratedImage]:
    with open(cameras_json) as f:
        entries = json.load(f)
    if not isinstance(entries, list) or not entries:
        raise ImageError(f"{cameras_json}: expected a nonempty list")
    out = []
    base = Path(images_dir)
    for e in entries:
        try:
            name = e["file"]
            k = np.asarray(e["K"], dtype=np.float64).reshape(3, 3)
            p = np.asarray(e["P"], dtype=np.float64).reshape(3, 4)
        except KeyError as exc:
            raise ImageError(f"{cameras_json}: camera entry missing {exc}")
        px = load_image(base / name)
        out.append(CalibratedImage(px, k, p))
    return out
