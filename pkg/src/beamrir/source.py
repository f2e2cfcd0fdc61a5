"""Learnable source model, residual field, and the full RIR renderer.

The rendered response is  rir(t) = (s * R)(t) + r(t)  where s is a learnable
source impulse response, R the sum of propagated per-path minimum-phase
kernels (directivity times the product of surface reflections along the
bounce sequence), and r a learned residual field that treats every surface
point as a secondary source reached by rays cast from the listener.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import dsp
from .beams import BeamConfig, trace_paths
from .dsp import FrequencyGrid, ImpulseResponse, default_grid
from .geometry import RoomGeometry, fibonacci_directions, intersect_batch
from .params import ParameterStore
from .reflection import IPEConfig, ReflectionModel, ipe_encode


@dataclass(frozen=True)
class RenderConfig:
    sample_rate: float = 16000.0
    rir_length: float = 0.32          # seconds of output
    beams: BeamConfig = BeamConfig()
    grid: FrequencyGrid = field(default_factory=default_grid)
    a0: float = 0.0                   # air absorption, nepers/m
    v_sound: float = 343.0
    n_threads: int = 1

    @property
    def n_samples(self):
        return int(round(self.rir_length * self.sample_rate))


def _rotation_from_z(target):
    """Rotation matrix taking +z to the unit vector target (Rodrigues)."""
    t = np.asarray(target, dtype=np.float64)
    t = t / np.linalg.norm(t)
    z = np.array([0.0, 0.0, 1.0])
    v = np.cross(z, t)
    c = float(np.dot(z, t))
    if c < -1.0 + 1e-12:  # antipodal: flip about x
        return np.diag([1.0, -1.0, -1.0])
    k = np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])
    return np.eye(3) + k + k @ k / (1.0 + c)


@dataclass(frozen=True)
class SourceModel:
    """Learnable source IR plus spherical-Gaussian lobe directivity."""

    n_keys: int
    s_len: int = 1024
    n_lobes: int = 16
    sharpness: float = 8.0
    omni: bool = False  # bypass the lobes: D = 1 at every key frequency

    def init_params(self, store: ParameterStore):
        s0 = np.zeros(self.s_len)
        s0[0] = 1.0
        s0 += 1e-3 * store.rng.standard_normal(self.s_len)
        store.add("src.s", s0)
        store.add("src.dir_w", np.ones((self.n_lobes, self.n_keys)))
        return store

    def lobe_axes(self, orientation):
        """Fixed Fibonacci lobe axes rotated so the lattice pole follows
        the source orientation."""
        rot = _rotation_from_z(orientation)
        return fibonacci_directions(self.n_lobes) @ rot.T

    def lobe_energies(self, dirs, axes):
        """exp(kappa (d.a - 1)) per (direction, lobe); constants, not taped."""
        dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
        return np.exp(self.sharpness * (dirs @ axes.T - 1.0))

    def directivity(self, dirs, orientation, params):
        """Per-key-frequency emission gains, shape (P, n_keys), clamped >= 0."""
        if self.omni:
            return np.ones((len(np.atleast_2d(dirs)), self.n_keys))
        e = self.lobe_energies(dirs, self.lobe_axes(orientation))
        return ad.relu(ad.matmul(e, params["src.dir_w"]))


@dataclass(frozen=True)
class ResidualModel:
    """Position-dependent residual field: rays cast from the listener land on
    the surface; a 4-layer perceptron emits coefficients over a fixed bank of
    decaying-cosine time atoms, and each ray's series is propagated back."""

    n_rays: int = 64
    n_atoms: int = 64
    width: int = 128
    enc: IPEConfig = IPEConfig(n_octaves=6, base_freq=1.0)
    seed: int = 0

    @property
    def in_dim(self):
        return 3 * self.enc.dim + 3  # enc(x'), enc(-w), enc(x_a), raw p

    def init_params(self, store: ParameterStore):
        store.linear("residual.l1", self.in_dim, self.width)
        store.linear("residual.l2", self.width, self.width)
        store.linear("residual.l3", self.width, self.width)
        w4, _ = store.linear("residual.l4", self.width, self.n_atoms)
        w4.data *= 1e-3  # start with a near-silent residual
        return store

    def atom_bank(self, n_samples, sample_rate):
        """(n_atoms, n_samples) decaying cosines spanning the output window."""
        t = np.arange(n_samples) / sample_rate
        dur = n_samples / sample_rate
        n_dec = int(np.sqrt(self.n_atoms))
        n_frq = self.n_atoms // n_dec
        decays = np.geomspace(0.02, max(dur, 0.03), n_dec)
        freqs = np.concatenate([[0.0], np.geomspace(30.0, 0.45 * sample_rate,
                                                    n_frq - 1)])
        atoms = np.empty((n_dec * n_frq, n_samples))
        i = 0
        for d in decays:
            for f in freqs:
                atoms[i] = np.exp(-t / d) * np.cos(2.0 * np.pi * f * t)
                i += 1
        if i < self.n_atoms:  # pad with pure decays when n_atoms not square
            extra = np.geomspace(0.01, dur, self.n_atoms - i)
            atoms = np.vstack([atoms] + [np.exp(-t / d)[None] for d in extra])
        return atoms[: self.n_atoms]

    def render(self, listener, source, orientation, geom: RoomGeometry,
               params, cfg: RenderConfig):
        """Residual time series on the output grid (Var of cfg.n_samples)."""
        n_out = cfg.n_samples
        if self.n_rays == 0 or geom is None:
            return np.zeros(n_out)
        rng = np.random.default_rng(self.seed)
        dirs = rng.standard_normal((self.n_rays, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        listener = np.asarray(listener, dtype=np.float64)
        origins = np.broadcast_to(listener, (self.n_rays, 3))
        t, _, hit = intersect_batch(geom, origins, dirs)
        if not hit.any():
            return np.zeros(n_out)
        t, dirs = t[hit], dirs[hit]
        x_hit = listener + t[:, None] * dirs
        tau = t / cfg.v_sound
        feats = np.concatenate([
            ipe_encode(x_hit, None, self.enc),
            ipe_encode(-dirs, None, self.enc),
            np.broadcast_to(ipe_encode(np.asarray(source, float), None,
                                       self.enc), (len(t), self.enc.dim)),
            np.broadcast_to(np.asarray(orientation, float), (len(t), 3)),
        ], axis=-1)
        h = ad.relu(ad.matmul(feats, params["residual.l1.W"]) + params["residual.l1.b"])
        h = ad.relu(ad.matmul(h, params["residual.l2.W"]) + params["residual.l2.b"])
        h = ad.relu(ad.matmul(h, params["residual.l3.W"]) + params["residual.l3.b"])
        coeffs = ad.matmul(h, params["residual.l4.W"]) + params["residual.l4.b"]
        series = ad.matmul(coeffs, self.atom_bank(n_out, cfg.sample_rate))
        return dsp.delay_sum(series, tau * cfg.sample_rate,
                             dsp.propagation_scale(tau, cfg.a0, cfg.v_sound),
                             n_out)


@dataclass(frozen=True)
class RirModel:
    """Bundles the three learnable parts and renders full RIRs."""

    reflection: ReflectionModel
    source: SourceModel
    residual: ResidualModel | None = None

    @classmethod
    def build(cls, grid: FrequencyGrid, feature_dim=32, n_resid_rays=0,
              s_len=1024, knn_k=8, seed=0):
        refl = ReflectionModel(n_keys=grid.n_keys, feature_dim=feature_dim,
                               knn_k=knn_k)
        src = SourceModel(n_keys=grid.n_keys, s_len=s_len)
        resid = ResidualModel(n_rays=n_resid_rays, seed=seed) \
            if n_resid_rays > 0 else None
        return cls(reflection=refl, source=src, residual=resid)

    def init_params(self, seed=0) -> ParameterStore:
        store = ParameterStore(seed=seed)
        self.reflection.init_params(store)
        self.source.init_params(store)
        if self.residual is not None:
            self.residual.init_params(store)
        return store

    def render(self, source, orientation, listener, geom, params,
               cfg: RenderConfig, bank=None, basis=None, paths=None,
               fused=None, max_order=None):
        """Render the RIR as a taped Var of length cfg.n_samples."""
        source = np.asarray(source, dtype=np.float64)
        listener = np.asarray(listener, dtype=np.float64)
        dsp.set_fft_workers(cfg.n_threads)
        if paths is None:
            paths = trace_paths(geom, source, listener, cfg.beams,
                                v_sound=cfg.v_sound, n_threads=cfg.n_threads)
        if max_order is not None:
            paths = [p for p in paths if p.order <= max_order]
        n_out = cfg.n_samples
        grid = cfg.grid

        spec = np.zeros(n_out)
        if paths:
            n_paths = len(paths)
            out_dirs = np.empty((n_paths, 3))
            for i, p in enumerate(paths):
                tgt = p.points[0] if p.order > 0 else listener
                v = tgt - source
                out_dirs[i] = v / np.linalg.norm(v)
            gains = self.source.directivity(out_dirs, orientation, params)
            hit_paths = [p for p in paths if p.order > 0]
            if hit_paths:
                pts = np.concatenate([p.points for p in hit_paths])
                covs = np.concatenate([p.covariances for p in hit_paths])
                seg = np.concatenate([np.full(p.order, i) for i, p in
                                      enumerate(paths) if p.order > 0])
                refl = self.reflection.reflection_at(pts, covs, bank, basis,
                                                     params, fused=fused)
                logr = ad.log(ad.clip_min(refl, 1e-12))
                prod = ad.exp(ad.segment_sum(logr, seg, n_paths))
                gains = gains * prod
            bins = dsp.interp_to_bins(grid, gains)
            kernels = dsp.min_phase(bins, grid.fft_size)
            toas = np.array([p.toa for p in paths])
            rsum = dsp.assemble_rir(kernels, toas, cfg.sample_rate, n_out,
                                    a0=cfg.a0, v=cfg.v_sound)
            conv = dsp.convolve_samples(params["src.s"], rsum)
            spec = conv[slice(0, n_out)] if isinstance(conv, ad.Var) \
                else np.asarray(conv)[:n_out]
        if self.residual is not None and self.residual.n_rays > 0:
            spec = spec + self.residual.render(listener, source, orientation,
                                               geom, params, cfg)
        return spec

    def render_ir(self, source, orientation, listener, geom, params,
                  cfg: RenderConfig, **kw) -> ImpulseResponse:
        out = ad.value(self.render(source, orientation, listener, geom,
                                   params, cfg, **kw))
        return ImpulseResponse(out, cfg.sample_rate)


def config_to_json(model: RirModel, cfg: RenderConfig) -> dict:
    """JSON-serializable description of a model + render configuration."""
    return {
        "render": {
            "sample_rate": cfg.sample_rate, "rir_length": cfg.rir_length,
            "a0": cfg.a0, "v_sound": cfg.v_sound,
            "n_beams": cfg.beams.n_beams, "max_depth": cfg.beams.max_depth,
            "half_apex": cfg.beams.half_apex,
            "key_freqs": cfg.grid.key_freqs.tolist(),
            "fft_size": cfg.grid.fft_size,
        },
        "model": {
            "n_keys": model.reflection.n_keys,
            "feature_dim": model.reflection.feature_dim,
            "agg_dim": model.reflection.agg_dim,
            "fuse_dim": model.reflection.fuse_dim,
            "head_width": model.reflection.head_width,
            "knn_k": model.reflection.knn_k,
            "ipe_octaves": model.reflection.ipe.n_octaves,
            "ipe_base": model.reflection.ipe.base_freq,
            "s_len": model.source.s_len,
            "n_lobes": model.source.n_lobes,
            "sharpness": model.source.sharpness,
            "omni": model.source.omni,
            "n_resid_rays": 0 if model.residual is None
            else model.residual.n_rays,
            "resid_atoms": 64 if model.residual is None
            else model.residual.n_atoms,
            "resid_width": 128 if model.residual is None
            else model.residual.width,
            "resid_seed": 0 if model.residual is None
            else model.residual.seed,
        },
    }


def config_from_json(d: dict) -> tuple[RirModel, RenderConfig]:
    r = d["render"]
    m = d["model"]
    cfg = RenderConfig(
        sample_rate=float(r["sample_rate"]), rir_length=float(r["rir_length"]),
        a0=float(r.get("a0", 0.0)), v_sound=float(r.get("v_sound", 343.0)),
        beams=BeamConfig(n_beams=int(r["n_beams"]),
                         max_depth=int(r["max_depth"]),
                         half_apex=r.get("half_apex")),
        grid=FrequencyGrid(np.asarray(r["key_freqs"], dtype=float),
                           int(r["fft_size"]), float(r["sample_rate"])))
    from .reflection import ReflectionModel  # local to avoid cycle at import
    ipe = IPEConfig(n_octaves=int(m.get("ipe_octaves", 6)),
                    base_freq=float(m.get("ipe_base", 1.0)))
    refl = ReflectionModel(n_keys=int(m["n_keys"]),
                           feature_dim=int(m["feature_dim"]),
                           agg_dim=int(m["agg_dim"]),
                           fuse_dim=int(m["fuse_dim"]),
                           head_width=int(m["head_width"]),
                           knn_k=int(m["knn_k"]), ipe=ipe)
    src = SourceModel(n_keys=int(m["n_keys"]), s_len=int(m["s_len"]),
                      n_lobes=int(m["n_lobes"]),
                      sharpness=float(m["sharpness"]),
                      omni=bool(m.get("omni", False)))
    n_rays = int(m.get("n_resid_rays", 0))
    resid = ResidualModel(n_rays=n_rays, n_atoms=int(m.get("resid_atoms", 64)),
                          width=int(m.get("resid_width", 128)),
                          seed=int(m.get("resid_seed", 0))) \
        if n_rays > 0 else None
    return RirModel(reflection=refl, source=src, residual=resid), cfg


def render_rir(source, orientation, listener, geom, params, cfg: RenderConfig,
               model: RirModel | None = None, bank=None, basis=None,
               **kw) -> ImpulseResponse:
    """One-call rendering entry point (builds a default model if none given)."""
    if model is None:
        model = RirModel.build(cfg.grid)
    return model.render_ir(source, orientation, listener, geom, params, cfg,
                           bank=bank, basis=basis, **kw)
