"""Triangle-mesh scene loading and ray casting for visibility tests.

Reads the geometry JSON interchange format ({"vertices": [[x,y,z],...],
"faces": [[i,j,k],...]}) and the basis-point JSON ({"voxel_size": v,
"points": [[x,y,z],...]}) and provides a vectorized occlusion test.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

EPS = 1e-9
SURFACE_SLACK = 1e-6  # points on the mesh may hit their own face


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class Scene:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray     # (F, 3) int

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3 or len(v) == 0:
            raise SceneError("vertices must be a nonempty (V, 3) array")
        if f.ndim != 2 or f.shape[1] != 3 or len(f) == 0:
            raise SceneError("faces must be a nonempty (F, 3) array")
        if f.min() < 0 or f.max() >= len(v):
            raise SceneError("face index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        object.__setattr__(self, "_v0", v[f[:, 0]])
        object.__setattr__(self, "_e1", v[f[:, 1]] - v[f[:, 0]])
        object.__setattr__(self, "_e2", v[f[:, 2]] - v[f[:, 0]])

    @property
    def n_faces(self):
        return len(self.faces)


def load_scene(path) -> Scene:
    with open(path) as f:
        d = json.load(f)
    try:
        return Scene(np.asarray(d["vertices"], dtype=np.float64),
                     np.asarray(d["faces"], dtype=np.int64))
    except KeyError as exc:
        raise SceneError(f"{path}: missing geometry key {exc}") from exc


def load_basis(path) -> np.ndarray:
    with open(path) as f:
        d = json.load(f)
    pts = np.asarray(d["points"], dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise SceneError(f"{path}: basis points must be (N, 3)")
    return pts


def segments_clear(scene: Scene, origin, targets) -> np.ndarray:
    """True per target when nothing blocks the segment origin -> target.

    Targets are allowed to lie on the mesh; hits within SURFACE_SLACK of the
    target (its own face) do not count as occlusion.  Vectorized
    Moller-Trumbore over all (segment, triangle) pairs.
    """
    origin = np.asarray(origin, dtype=np.float64)
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    d = targets - origin                                    # (N, 3)
    dist = np.linalg.norm(d, axis=1)
    safe = np.maximum(dist, EPS)
    dirs = d / safe[:, None]

    v0, e1, e2 = scene._v0, scene._e1, scene._e2            # (F, 3)
    p = np.cross(dirs[:, None, :], e2[None, :, :])          # (N, F, 3)
    det = np.einsum("fk,nfk->nf", e1, p)
    ok = np.abs(det) > EPS
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tv = origin - v0                                        # (F, 3)
    u = np.einsum("fk,nfk->nf", tv, p) * inv
    q = np.cross(tv, e1)                                    # (F, 3)
    v = np.einsum("nk,fk->nf", dirs, q) * inv
    t = np.einsum("fk,fk->f", e2, q)[None, :] * inv
    blocking = (ok & (u >= -EPS) & (v >= -EPS) & (u + v <= 1.0 + EPS)
                & (t > EPS) & (t < (dist - SURFACE_SLACK)[:, None]))
    return ~blocking.any(axis=1)
