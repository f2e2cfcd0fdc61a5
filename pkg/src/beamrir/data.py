"""Dataset manifests, WAV I/O, and the image-source shoebox oracle.

The oracle enumerates exact image sources in an empty axis-aligned box and
assembles the reference RIR through the same interpolation / minimum-phase /
propagation code as the renderer, so oracle-vs-engine comparisons isolate
the beam tracer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.io.wavfile

from . import autodiff as ad
from . import dsp
from .dsp import FrequencyGrid, ImpulseResponse, default_grid
from .geometry import shoebox_geometry, save_geometry
from .training import MeasurementRecord


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# WAV I/O (RIFF float32 mono)
# ---------------------------------------------------------------------------


def save_wav(path, ir: ImpulseResponse):
    scipy.io.wavfile.write(path, int(ir.sample_rate),
                           ir.samples.astype(np.float32))


def load_wav(path) -> ImpulseResponse:
    sr, data = scipy.io.wavfile.read(path)
    if data.ndim != 1:
        raise DataError(f"{path}: expected mono audio")
    if data.dtype != np.float32:
        raise DataError(f"{path}: expected float32 samples, got {data.dtype}")
    return ImpulseResponse(data.astype(np.float64), float(sr))


# ---------------------------------------------------------------------------
# image-source oracle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ShoeboxSpec:
    """Empty axis-aligned box with per-wall key-frequency reflection gains.

    Wall order matches the shoebox mesh: (x=0, x=Lx, y=0, y=Ly, z=0, z=Lz).
    reflection is (6,) frequency-flat or (6, F) per key frequency, in [0, 1].
    """

    dimensions: np.ndarray          # (3,) meters
    reflection: np.ndarray          # (6,) or (6, F)
    max_order: int = 2

    def __post_init__(self):
        dims = np.asarray(self.dimensions, dtype=np.float64)
        refl = np.asarray(self.reflection, dtype=np.float64)
        if dims.shape != (3,) or np.any(dims <= 0):
            raise DataError("dimensions must be 3 positive lengths")
        if refl.shape[0] != 6 or refl.ndim not in (1, 2):
            raise DataError("reflection must be (6,) or (6, F)")
        if np.any(refl < 0) or np.any(refl > 1):
            raise DataError("reflection values must lie in [0, 1]")
        if self.max_order < 0:
            raise DataError("max_order must be >= 0")
        object.__setattr__(self, "dimensions", dims)
        object.__setattr__(self, "reflection", refl)

    def geometry(self):
        return shoebox_geometry(*self.dimensions)

    def to_json(self):
        return {"dimensions": self.dimensions.tolist(),
                "reflection": self.reflection.tolist(),
                "max_order": self.max_order}

    @classmethod
    def from_json(cls, d):
        return cls(np.asarray(d["dimensions"]), np.asarray(d["reflection"]),
                   int(d.get("max_order", 2)))


@dataclass(frozen=True)
class ImagePath:
    image: np.ndarray    # mirrored source position
    walls: tuple         # wall ids (2*axis + side) ordered source -> listener
    distance: float


def image_source_paths(spec: ShoeboxSpec, src, lst, order) -> list[ImagePath]:
    """All image-source paths up to the given reflection order.

    Per axis, image n (integer) sits at n*L + (x if n even else L - x) with
    |n| bounces; the ordered wall sequence follows from the plane crossings
    of the unfolded straight segment.
    """
    src = np.asarray(src, dtype=np.float64)
    lst = np.asarray(lst, dtype=np.float64)
    dims = spec.dimensions
    if np.any(src <= 0) or np.any(src >= dims) or np.any(lst <= 0) \
            or np.any(lst >= dims):
        raise DataError("source and listener must lie strictly inside the box")
    per_axis = []
    for a in range(3):
        entries = []
        for n in range(-order, order + 1):
            coord = n * dims[a] + (src[a] if n % 2 == 0 else dims[a] - src[a])
            entries.append((n, coord, abs(n)))
        per_axis.append(entries)
    out = []
    for nx, cx, bx in per_axis[0]:
        for ny, cy, by in per_axis[1]:
            if bx + by > order:
                continue
            for nz, cz, bz in per_axis[2]:
                if bx + by + bz > order:
                    continue
                img = np.array([cx, cy, cz])
                seg = img - lst
                dist = float(np.linalg.norm(seg))
                crossings = []
                for a in range(3):
                    lo, hi = sorted((lst[a], img[a]))
                    k0 = int(np.floor(lo / dims[a])) + 1
                    k1 = int(np.ceil(hi / dims[a])) - 1
                    for k in range(k0, k1 + 1):
                        t = (k * dims[a] - lst[a]) / seg[a]
                        wall = 2 * a + (0 if k % 2 == 0 else 1)
                        crossings.append((t, wall))
                crossings.sort()
                # crossings run listener -> image; reverse for source order
                walls = tuple(w for _, w in reversed(crossings))
                if len(walls) != bx + by + bz:
                    raise DataError("inconsistent image-path bookkeeping")
                out.append(ImagePath(image=img, walls=walls, distance=dist))
    return sorted(out, key=lambda p: (len(p.walls), p.distance))


def oracle_rir(spec: ShoeboxSpec, src, lst, order, grid: FrequencyGrid,
               sample_rate=None, rir_length=0.32, a0=0.0, v=343.0,
               source_ir: ImpulseResponse | None = None) -> ImpulseResponse:
    """Reference RIR from exact image sources, assembled via the shared DSP."""
    sr = grid.sample_rate if sample_rate is None else float(sample_rate)
    n_out = int(round(rir_length * sr))
    paths = image_source_paths(spec, src, lst, order)
    refl = spec.reflection
    if refl.ndim == 1:
        refl = np.repeat(refl[:, None], grid.n_keys, axis=1)
    mags = np.empty((len(paths), grid.n_keys))
    toas = np.empty(len(paths))
    for i, p in enumerate(paths):
        m = np.ones(grid.n_keys)
        for w in p.walls:
            m = m * refl[w]
        mags[i] = m
        toas[i] = p.distance / v
    bins = ad.value(dsp.interp_to_bins(grid, mags))
    kernels = ad.value(dsp.min_phase(bins, grid.fft_size))
    out = ad.value(dsp.assemble_rir(kernels, toas, sr, n_out, a0=a0, v=v))
    if source_ir is not None:
        if source_ir.sample_rate != sr:
            raise DataError("source IR sample rate mismatch")
        out = np.convolve(out, source_ir.samples)[:n_out]
    return ImpulseResponse(out, sr)


# ---------------------------------------------------------------------------
# manifests and synthetic dataset generation
# ---------------------------------------------------------------------------


@dataclass
class DatasetManifest:
    scene_id: str
    geometry_path: str
    sample_rate: float
    rir_length: float
    records: list            # dicts: source, orientation, listener, wav
    feature_bank_path: str | None = None
    basis_path: str | None = None

    def to_json(self):
        d = {"scene_id": self.scene_id, "geometry_path": self.geometry_path,
             "sample_rate": self.sample_rate, "rir_length": self.rir_length,
             "records": self.records}
        if self.feature_bank_path:
            d["feature_bank_path"] = self.feature_bank_path
        if self.basis_path:
            d["basis_path"] = self.basis_path
        return d


def save_manifest(manifest: DatasetManifest, path):
    with open(path, "w") as f:
        json.dump(manifest.to_json(), f, indent=2)


def load_manifest(path, check_files=True) -> DatasetManifest:
    base = Path(path).parent
    with open(path) as f:
        d = json.load(f)
    m = DatasetManifest(
        scene_id=d["scene_id"], geometry_path=d["geometry_path"],
        sample_rate=float(d["sample_rate"]), rir_length=float(d["rir_length"]),
        records=d["records"],
        feature_bank_path=d.get("feature_bank_path"),
        basis_path=d.get("basis_path"))
    if check_files:
        paths = [m.geometry_path] + [r["wav"] for r in m.records]
        if m.feature_bank_path:
            paths.append(m.feature_bank_path)
        if m.basis_path:
            paths.append(m.basis_path)
        for p in paths:
            if not (base / p).exists():
                raise DataError(f"manifest references missing file: {p}")
    return m


def manifest_records(manifest: DatasetManifest, base_dir) -> list[MeasurementRecord]:
    base = Path(base_dir)
    out = []
    for r in manifest.records:
        ir = load_wav(base / r["wav"])
        if ir.sample_rate != manifest.sample_rate:
            raise DataError(f"{r['wav']}: sample rate differs from manifest")
        out.append(MeasurementRecord(
            source=np.asarray(r["source"], dtype=np.float64),
            orientation=np.asarray(r["orientation"], dtype=np.float64),
            listener=np.asarray(r["listener"], dtype=np.float64),
            rir=ir))
    return out


WALL_MARGIN = 0.3  # meters kept clear between sampled positions and walls


def gen_synthetic(spec: ShoeboxSpec, n_train, n_test, seed, out_dir,
                  grid: FrequencyGrid | None = None, rir_length=0.32,
                  source_ir: ImpulseResponse | None = None):
    """Write a synthetic shoebox dataset; returns (train, test) manifests.

    Positions are uniform in the interior with a 0.3 m wall margin; RIRs are
    image-source oracle renders up to spec.max_order, optionally convolved
    with a synthetic source IR.
    """
    if n_train < 1 or n_test < 0:
        raise DataError("n_train >= 1 required")
    grid = default_grid() if grid is None else grid
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    dims = spec.dimensions
    if np.any(dims <= 2 * WALL_MARGIN):
        raise DataError("box too small for the wall margin")
    save_geometry(spec.geometry(), out / "geometry.json")
    with open(out / "shoebox.json", "w") as f:
        json.dump(spec.to_json(), f, indent=2)

    def sample_pos():
        return WALL_MARGIN + rng.random(3) * (dims - 2 * WALL_MARGIN)

    def sample_orient():
        v = rng.standard_normal(3)
        return v / np.linalg.norm(v)

    manifests = []
    for split, n in (("train", n_train), ("test", n_test)):
        records = []
        for i in range(n):
            src = sample_pos()
            lst = sample_pos()
            orient = sample_orient()
            ir = oracle_rir(spec, src, lst, spec.max_order, grid,
                            rir_length=rir_length, source_ir=source_ir)
            wav = f"{split}_{i:03d}.wav"
            save_wav(out / wav, ir)
            records.append({"source": src.tolist(),
                            "orientation": orient.tolist(),
                            "listener": lst.tolist(), "wav": wav})
        m = DatasetManifest(scene_id=f"shoebox_{split}",
                            geometry_path="geometry.json",
                            sample_rate=grid.sample_rate,
                            rir_length=rir_length, records=records)
        save_manifest(m, out / f"{split}.json")
        manifests.append(m)
    return tuple(manifests)
