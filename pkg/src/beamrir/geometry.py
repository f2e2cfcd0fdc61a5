"""Room geometry: triangle soup, ray intersection, visibility, sampling.

Units are meters throughout, right-handed coordinates.  All operations are
pure functions; ``RoomGeometry`` and ``BasisPointSet`` are immutable after
construction and safe for concurrent reads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

EPS_SELF_HIT = 1e-6  # ray-origin bias against re-hitting the launch face
_GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class RoomGeometry:
    """Triangle soup with per-face unit normals."""

    vertices: np.ndarray  # (V, 3) float
    faces: np.ndarray     # (T, 3) int
    face_normals: np.ndarray = field(default=None)  # (T, 3), computed if omitted

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3 or len(v) == 0:
            raise GeometryError("vertices must be a non-empty (V, 3) array")
        if f.ndim != 2 or f.shape[1] != 3 or len(f) == 0:
            raise GeometryError("faces must be a non-empty (T, 3) array")
        if f.min() < 0 or f.max() >= len(v):
            raise GeometryError("face index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if self.face_normals is None:
            a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
            n = np.cross(b - a, c - a)
            norm = np.linalg.norm(n, axis=1, keepdims=True)
            if np.any(norm < 1e-12):
                raise GeometryError("degenerate face")
            object.__setattr__(self, "face_normals", n / norm)
        else:
            n = np.asarray(self.face_normals, dtype=np.float64)
            if n.shape != f.shape:
                raise GeometryError("face_normals shape mismatch")
            if np.any(np.abs(np.linalg.norm(n, axis=1) - 1.0) > 1e-6):
                raise GeometryError("face normals must be unit length")
            object.__setattr__(self, "face_normals", n)
        # cached per-face vertex triples for vectorized intersection
        object.__setattr__(self, "_v0", v[f[:, 0]])
        object.__setattr__(self, "_e1", v[f[:, 1]] - v[f[:, 0]])
        object.__setattr__(self, "_e2", v[f[:, 2]] - v[f[:, 0]])
        groups = _plane_groups(self.face_normals, self._v0)
        object.__setattr__(self, "plane_groups", groups)
        # coplanar members per face, -1 padded, for batched on-plane tests
        max_m = int(np.bincount(groups).max())
        members = np.full((len(groups), max_m), -1, dtype=np.int64)
        for fid, g in enumerate(groups):
            row = np.flatnonzero(groups == g)
            members[fid, : len(row)] = row
        object.__setattr__(self, "_group_members", members)
        # plane/barycentric precomputation: u = a.(p - v0), v = b.(p - v0)
        # turns batched ray-triangle tests into a few (R,3)x(3,T) matmuls
        e1, e2 = self._e1, self._e2
        d11 = np.einsum("ij,ij->i", e1, e1)
        d12 = np.einsum("ij,ij->i", e1, e2)
        d22 = np.einsum("ij,ij->i", e2, e2)
        det = d11 * d22 - d12 * d12
        a = (d22[:, None] * e1 - d12[:, None] * e2) / det[:, None]
        b = (d11[:, None] * e2 - d12[:, None] * e1) / det[:, None]
        object.__setattr__(self, "_plane_nT", np.ascontiguousarray(self.face_normals.T))
        object.__setattr__(self, "_plane_off", np.einsum("ij,ij->i", self.face_normals, self._v0))
        object.__setattr__(self, "_bary_aT", np.ascontiguousarray(a.T))
        object.__setattr__(self, "_bary_bT", np.ascontiguousarray(b.T))
        object.__setattr__(self, "_bary_a0", np.einsum("ij,ij->i", a, self._v0))
        object.__setattr__(self, "_bary_b0", np.einsum("ij,ij->i", b, self._v0))

    @property
    def n_faces(self):
        return len(self.faces)

    def face_areas(self):
        return 0.5 * np.linalg.norm(np.cross(self._e1, self._e2), axis=1)


def _plane_groups(normals, points):
    """Group coplanar faces: id per face, identical for faces sharing a plane.

    Normal orientation is ignored so the two winding conventions of one wall
    land in one group.
    """
    n = np.round(normals / 1e-6) * 1e-6
    flip = (n[:, 0] < 0) | ((n[:, 0] == 0) & (n[:, 1] < 0)) \
        | ((n[:, 0] == 0) & (n[:, 1] == 0) & (n[:, 2] < 0))
    n = np.where(flip[:, None], -n, n)
    off = np.round(np.einsum("ij,ij->i", n, points) / 1e-6) * 1e-6
    keys = np.column_stack([n, off])
    _, groups = np.unique(np.round(keys, 6), axis=0, return_inverse=True)
    # renumber in order of first appearance so group ids follow face order
    # (for a shoebox, group w covers faces 2w and 2w+1)
    remap: dict[int, int] = {}
    out = np.empty(len(groups), dtype=np.int64)
    for i, g in enumerate(groups):
        out[i] = remap.setdefault(int(g), len(remap))
    return out


@dataclass(frozen=True)
class HitRecord:
    point: np.ndarray
    normal: np.ndarray
    face_id: int
    distance: float


@dataclass(frozen=True)
class BasisPointSet:
    points: np.ndarray  # (N, 3)
    voxel_size: float


def load_geometry(path) -> RoomGeometry:
    """Load a geometry file: JSON {vertices, faces} or a Wavefront .obj."""
    text = open(path).read()
    if str(path).endswith(".obj") or text.lstrip().startswith(("v ", "#", "o ")):
        return _parse_obj(text)
    data = json.loads(text)
    return RoomGeometry(np.asarray(data["vertices"], dtype=float),
                        np.asarray(data["faces"], dtype=int))


def save_geometry(geom: RoomGeometry, path):
    with open(path, "w") as f:
        json.dump({"vertices": geom.vertices.tolist(),
                   "faces": geom.faces.tolist()}, f)


def _parse_obj(text) -> RoomGeometry:
    verts, faces = [], []
    for line in text.splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
            for k in range(1, len(idx) - 1):  # fan-triangulate polygons
                faces.append([idx[0], idx[k], idx[k + 1]])
    return RoomGeometry(np.asarray(verts, dtype=float), np.asarray(faces, dtype=int))


def shoebox_geometry(lx, ly, lz) -> RoomGeometry:
    """Axis-aligned box [0,lx]x[0,ly]x[0,lz], each wall split into 2 triangles.

    Face ids 2w and 2w+1 belong to wall w, ordered (x=0, x=lx, y=0, y=ly,
    z=0, z=lz).
    """
    v = np.array([[x, y, z] for x in (0, lx) for y in (0, ly) for z in (0, lz)],
                 dtype=float)
    # vertex index = 4*xi + 2*yi + zi
    quads = [
        [0, 1, 3, 2],  # x = 0
        [4, 6, 7, 5],  # x = lx
        [0, 4, 5, 1],  # y = 0
        [2, 3, 7, 6],  # y = ly
        [0, 2, 6, 4],  # z = 0
        [1, 5, 7, 3],  # z = lz
    ]
    faces = []
    for q in quads:
        faces.append([q[0], q[1], q[2]])
        faces.append([q[0], q[2], q[3]])
    return RoomGeometry(v, np.asarray(faces, dtype=int))


def intersect_batch(geom: RoomGeometry, origins, dirs, t_min=EPS_SELF_HIT, t_max=np.inf):
    """Vectorized Moller-Trumbore: nearest hit per ray.

    origins, dirs: (R, 3).  Returns (t, face_id, hit_mask) with t = inf and
    face_id = -1 where a ray escapes.
    """
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    nd = dirs @ geom._plane_nT                              # (R, T)
    near_parallel = np.abs(nd) < 1e-12
    t = (geom._plane_off[None, :] - origins @ geom._plane_nT) \
        / np.where(near_parallel, 1.0, nd)
    u = (origins @ geom._bary_aT - geom._bary_a0) + t * (dirs @ geom._bary_aT)
    vpar = (origins @ geom._bary_bT - geom._bary_b0) + t * (dirs @ geom._bary_bT)
    bary_eps = 1e-9
    valid = (~near_parallel & (u >= -bary_eps) & (vpar >= -bary_eps)
             & (u + vpar <= 1.0 + bary_eps) & (t > t_min) & (t < t_max))
    t = np.where(valid, t, np.inf)
    face = np.argmin(t, axis=1)
    t_best = t[np.arange(len(t)), face]
    hit = np.isfinite(t_best)
    face = np.where(hit, face, -1)
    return t_best, face, hit


def intersect(geom: RoomGeometry, origin, direction):
    """Nearest forward intersection along a unit direction, or None."""
    t, face, hit = intersect_batch(geom, np.asarray(origin, float)[None, :],
                                   np.asarray(direction, float)[None, :])
    if not hit[0]:
        return None
    fid = int(face[0])
    p = np.asarray(origin, float) + t[0] * np.asarray(direction, float)
    return HitRecord(point=p, normal=geom.face_normals[fid].copy(),
                     face_id=fid, distance=float(t[0]))


def is_visible(geom: RoomGeometry | None, a, b) -> bool:
    """True iff the open segment (a, b) is unobstructed."""
    if geom is None:
        return True
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    seg = b - a
    dist = np.linalg.norm(seg)
    if dist < EPS_SELF_HIT:
        raise ValueError("is_visible requires distinct endpoints")
    d = seg / dist
    t, _, hit = intersect_batch(geom, a[None, :], d[None, :],
                                t_min=EPS_SELF_HIT, t_max=dist - EPS_SELF_HIT)
    return not bool(hit[0])


def segments_visible(geom: RoomGeometry | None, starts, ends):
    """Batched is_visible over (N, 3) start/end arrays."""
    starts = np.atleast_2d(starts)
    ends = np.atleast_2d(ends)
    if geom is None:
        return np.ones(len(starts), dtype=bool)
    seg = ends - starts
    dist = np.linalg.norm(seg, axis=1)
    dirs = seg / np.maximum(dist, 1e-300)[:, None]
    out = np.ones(len(starts), dtype=bool)
    ok = dist >= EPS_SELF_HIT
    if ok.any():
        t, _, hit = intersect_batch(geom, starts[ok], dirs[ok], t_min=EPS_SELF_HIT)
        out[ok] = ~(hit & (t < dist[ok] - EPS_SELF_HIT))
    return out


def sample_fibonacci(n: int, i: int):
    """i-th direction (1-based) of the n-point spherical Fibonacci lattice."""
    if not (1 <= i <= n):
        raise IndexError(f"fibonacci index {i} out of range for n={n}")
    return _fib_single(n, i)


def _fib_single(n, i):
    z = 1.0 - (2.0 * i - 1.0) / n
    r = np.sqrt(max(0.0, 1.0 - z * z))
    phi = _GOLDEN_ANGLE * (i - 1)
    return np.array([r * np.cos(phi), r * np.sin(phi), z])


def fibonacci_directions(n: int):
    """All n lattice directions, shape (n, 3)."""
    i = np.arange(1, n + 1, dtype=np.float64)
    z = 1.0 - (2.0 * i - 1.0) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = _GOLDEN_ANGLE * (i - 1.0)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def sample_surface(geom: RoomGeometry, n: int, rng):
    """Area-weighted uniform samples on the surface, shape (n, 3)."""
    areas = geom.face_areas()
    probs = areas / areas.sum()
    fid = rng.choice(geom.n_faces, size=n, p=probs)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    return geom._v0[fid] + u[:, None] * geom._e1[fid] + v[:, None] * geom._e2[fid]


def voxel_keys(points, voxel: float):
    return np.floor(np.asarray(points) / voxel).astype(np.int64)


def sample_basis_points(geom: RoomGeometry, n_dense: int = 100_000,
                        voxel: float = 0.2, seed: int = 0) -> BasisPointSet:
    """Voxel-downsampled surface samples, one representative per voxel.

    The representative is the dense sample closest to the voxel's mean.
    """
    if n_dense < 1 or voxel <= 0:
        raise ValueError("n_dense >= 1 and voxel > 0 required")
    rng = np.random.default_rng(seed)
    pts = sample_surface(geom, n_dense, rng)
    keys = voxel_keys(pts, voxel)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    sums = np.zeros((len(uniq), 3))
    counts = np.zeros(len(uniq))
    np.add.at(sums, inverse, pts)
    np.add.at(counts, inverse, 1.0)
    means = sums / counts[:, None]
    d2 = np.einsum("ij,ij->i", pts - means[inverse], pts - means[inverse])
    # per-voxel argmin via lexsort on (voxel, distance)
    order = np.lexsort((d2, inverse))
    first = np.searchsorted(inverse[order], np.arange(len(uniq)))
    reps = pts[order[first]]
    return BasisPointSet(points=reps, voxel_size=float(voxel))


def save_basis_points(basis: BasisPointSet, path):
    with open(path, "w") as f:
        json.dump({"voxel_size": basis.voxel_size,
                   "points": basis.points.tolist()}, f)


def load_basis_points(path) -> BasisPointSet:
    data = json.loads(open(path).read())
    return BasisPointSet(points=np.asarray(data["points"], dtype=float),
                         voxel_size=float(data["voxel_size"]))
