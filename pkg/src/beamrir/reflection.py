"""Frequency-dependent surface reflection response.

A learnable map from a surface contact patch (position + covariance) to
per-key-frequency reflection gains in (0, 1), optionally conditioned on a
bank of per-view visual features attached to surface basis points:

  * integrated positional encoding damps each Fourier octave by the patch
    variance along that axis;
  * per basis point, features from all camera views are aggregated with
    masked softmax cross-attention (hidden views contribute nothing);
  * a point-transformer layer fuses the k nearest basis points around the
    query patch;
  * a 4-layer perceptron with a sigmoid head emits the gains.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .params import ParameterStore

BANK_MAGIC = b"AVDF"
BANK_VERSION = 1
_MASK_OFF = -1e30  # additive logit mask standing in for -inf


class FeatureBankError(IOError):
    pass


# ---------------------------------------------------------------------------
# integrated positional encoding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IPEConfig:
    n_octaves: int = 6
    base_freq: float = 1.0  # cycles are 2*pi*base_freq*2^k per meter at octave k

    def __post_init__(self):
        if self.n_octaves < 1:
            raise ValueError("n_octaves >= 1 required")

    @property
    def dim(self):
        return 6 * self.n_octaves  # sin+cos per axis per octave


def ipe_encode(x, sigma=None, cfg: IPEConfig = IPEConfig()):
    """Variance-damped Fourier features of 3D points.

    x: (..., 3); sigma: (..., 3, 3) PSD or None (plain encoding).  Octave k
    contributes sin/cos(2^k * base * x_axis) damped by
    exp(-0.5 * (2^k * base)^2 * Sigma[axis, axis]).
    """
    x = np.asarray(x, dtype=np.float64)
    var = (np.zeros(x.shape) if sigma is None
           else np.diagonal(np.asarray(sigma, dtype=np.float64),
                            axis1=-2, axis2=-1))
    parts = []
    for k in range(cfg.n_octaves):
        f = cfg.base_freq * (2.0 ** k)
        damp = np.exp(-0.5 * f * f * var)
        parts.append(np.sin(f * x) * damp)
        parts.append(np.cos(f * x) * damp)
    return np.concatenate(parts, axis=-1)


# ---------------------------------------------------------------------------
# multi-view feature bank (binary interchange format)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ViewFeatureBank:
    """Per-(basis point, view) visual features with visibility masks."""

    features: np.ndarray    # (N_s, N_c, D_v) float
    visible: np.ndarray     # (N_s, N_c) bool
    extrinsics: np.ndarray  # (N_c, 12) flattened 3x4 camera matrices

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        m = np.asarray(self.visible, dtype=bool)
        e = np.asarray(self.extrinsics, dtype=np.float64)
        if f.ndim != 3 or m.shape != f.shape[:2]:
            raise FeatureBankError("features must be (N_s, N_c, D_v) with a "
                                   "matching (N_s, N_c) mask")
        if e.shape != (f.shape[1], 12):
            raise FeatureBankError("extrinsics must be (N_c, 12)")
        f = np.where(m[:, :, None], f, 0.0)  # hidden entries carry zeros
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "visible", m)
        object.__setattr__(self, "extrinsics", e)

    @property
    def n_points(self):
        return self.features.shape[0]

    @property
    def n_views(self):
        return self.features.shape[1]

    @property
    def feature_dim(self):
        return self.features.shape[2]


def save_feature_bank(bank: ViewFeatureBank, path):
    n_s, n_c, d_v = bank.features.shape
    with open(path, "wb") as f:
        f.write(BANK_MAGIC)
        f.write(struct.pack("<IIII", BANK_VERSION, n_s, n_c, d_v))
        f.write(bank.extrinsics.astype("<f4").tobytes())
        f.write(bank.features.astype("<f4").tobytes())
        f.write(np.packbits(bank.visible.reshape(-1)).tobytes())


def load_feature_bank(path) -> ViewFeatureBank:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != BANK_MAGIC:
        raise FeatureBankError(f"{path}: not a feature-bank file")
    if len(raw) < 20:
        raise FeatureBankError(f"{path}: truncated header")
    version, n_s, n_c, d_v = struct.unpack_from("<IIII", raw, 4)
    if version != BANK_VERSION:
        raise FeatureBankError(f"{path}: unsupported version {version}")
    n_feat = n_s * n_c * d_v
    n_mask_bytes = (n_s * n_c + 7) // 8
    if len(raw) < 20 + 4 * (12 * n_c + n_feat) + n_mask_bytes:
        raise FeatureBankError(f"{path}: truncated payload")
    off = 20
    ext = np.frombuffer(raw, dtype="<f4", count=12 * n_c, offset=off)
    off += 4 * 12 * n_c
    feat = np.frombuffer(raw, dtype="<f4", count=n_feat, offset=off)
    off += 4 * n_feat
    mask_bytes = np.frombuffer(raw, dtype=np.uint8, count=n_mask_bytes,
                               offset=off)
    visible = np.unpackbits(mask_bytes, count=n_s * n_c).astype(bool)
    return ViewFeatureBank(features=feat.reshape(n_s, n_c, d_v).astype(float),
                           visible=visible.reshape(n_s, n_c),
                           extrinsics=ext.reshape(n_c, 12).astype(float))


# ---------------------------------------------------------------------------
# reflection network
# ---------------------------------------------------------------------------


def _linear(x, w, b=None):
    y = ad.matmul(x, w)
    return y if b is None else y + b


@dataclass(frozen=True)
class ReflectionModel:
    """Shapes and wiring of the reflection network (weights live in a store)."""

    n_keys: int
    feature_dim: int = 32   # D_v of the consumed bank
    agg_dim: int = 64       # view-aggregation width (and fused feature dim)
    fuse_dim: int = 64      # point-transformer width
    head_width: int = 128
    knn_k: int = 8
    ipe: IPEConfig = IPEConfig()

    def init_params(self, store: ParameterStore):
        e = self.ipe.dim
        store.linear("refl.agg.q", e, self.agg_dim)
        store.linear("refl.agg.k", self.feature_dim + 12, self.agg_dim)
        store.linear("refl.agg.v", self.feature_dim, self.agg_dim)
        store.linear("refl.agg.ffn1", self.agg_dim, self.agg_dim)
        store.linear("refl.agg.ffn2", self.agg_dim, self.agg_dim)
        store.linear("refl.fuse.q", e, self.fuse_dim)
        store.linear("refl.fuse.k", self.agg_dim, self.fuse_dim)
        store.linear("refl.fuse.v", self.agg_dim, self.fuse_dim)
        store.linear("refl.fuse.pos1", 3, self.fuse_dim)
        store.linear("refl.fuse.pos2", self.fuse_dim, self.fuse_dim)
        store.linear("refl.fuse.g1", self.fuse_dim, self.fuse_dim)
        store.linear("refl.fuse.g2", self.fuse_dim, 1)
        store.linear("refl.head.l1", e + self.fuse_dim, self.head_width)
        store.linear("refl.head.l2", self.head_width, self.head_width)
        store.linear("refl.head.l3", self.head_width, self.head_width)
        store.linear("refl.head.l4", self.head_width, self.n_keys)
        return store

    # -- multi-view aggregation -------------------------------------------

    def aggregate_all(self, bank: ViewFeatureBank, basis_points, params):
        """Fused per-basis-point features, shape (N_s, agg_dim).

        Masked softmax cross-attention over views followed by a two-layer
        feed-forward network; points hidden in every view map to zero.
        """
        pts = np.asarray(basis_points, dtype=np.float64)
        if pts.shape != (bank.n_points, 3):
            raise FeatureBankError("basis points do not align with the bank")
        n_s, n_c = bank.n_points, bank.n_views
        enc = ipe_encode(pts, None, self.ipe)                        # (N_s, E)
        q = _linear(enc, params["refl.agg.q.W"], params["refl.agg.q.b"])
        key_in = np.concatenate(
            [bank.features,
             np.broadcast_to(bank.extrinsics[None], (n_s, n_c, 12))], axis=-1)
        k = _linear(key_in, params["refl.agg.k.W"], params["refl.agg.k.b"])
        v = _linear(bank.features, params["refl.agg.v.W"], params["refl.agg.v.b"])
        logits = ad.asum(q.reshape(n_s, 1, self.agg_dim) * k, axis=-1)
        logits = logits * (1.0 / np.sqrt(self.agg_dim))
        logits = logits + np.where(bank.visible, 0.0, _MASK_OFF)
        w = ad.softmax(logits, axis=-1)                              # (N_s, N_c)
        raw = ad.asum(w.reshape(n_s, n_c, 1) * v, axis=1)            # (N_s, agg)
        h = ad.relu(_linear(raw, params["refl.agg.ffn1.W"],
                            params["refl.agg.ffn1.b"]))
        out = _linear(h, params["refl.agg.ffn2.W"], params["refl.agg.ffn2.b"])
        has_view = bank.visible.any(axis=1).astype(np.float64)
        return out * has_view[:, None]

    def aggregate_views(self, bank: ViewFeatureBank, j: int, basis_points, params):
        """Fused feature of basis point j (single-point view of aggregate_all)."""
        return self.aggregate_all(bank, basis_points, params)[int(j)]

    # -- neighborhood fusion ----------------------------------------------

    def fuse_neighborhood(self, x, sigma, fused, basis_points, params, k=None):
        """Point-transformer attention over the k nearest basis points.

        x: (H, 3) query patches, sigma: (H, 3, 3); fused: (N_s, agg_dim)
        output of aggregate_all.  Returns (H, fuse_dim).
        """
        k = self.knn_k if k is None else int(k)
        pts = np.asarray(basis_points, dtype=np.float64)
        if k > len(pts):
            raise ValueError(f"k={k} exceeds {len(pts)} basis points")
        if len(pts) == 0:
            raise ValueError("empty basis set")
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        h = len(x)
        _, idx = cKDTree(pts).query(x, k=k)
        idx = idx.reshape(h, k)
        offsets = x[:, None, :] - pts[idx]                            # (H, k, 3)
        enc = ipe_encode(x, sigma, self.ipe)                          # (H, E)
        q = _linear(enc, params["refl.fuse.q.W"], params["refl.fuse.q.b"])
        vstar = ad.apply("getitem", fused, idx=idx)                   # (H, k, agg)
        kp = _linear(vstar, params["refl.fuse.k.W"], params["refl.fuse.k.b"])
        vp = _linear(vstar, params["refl.fuse.v.W"], params["refl.fuse.v.b"])
        delta = _linear(
            ad.relu(_linear(offsets, params["refl.fuse.pos1.W"],
                            params["refl.fuse.pos1.b"])),
            params["refl.fuse.pos2.W"], params["refl.fuse.pos2.b"])
        pre = q.reshape(h, 1, self.fuse_dim) - kp + delta
        gh = ad.relu(_linear(pre, params["refl.fuse.g1.W"],
                             params["refl.fuse.g1.b"]))
        logits = _linear(gh, params["refl.fuse.g2.W"],
                         params["refl.fuse.g2.b"]).reshape(h, k)
        w = ad.softmax(logits, axis=-1)
        return ad.asum(w.reshape(h, k, 1) * (vp + delta), axis=1)

    # -- reflection head ----------------------------------------------------

    def reflection_response(self, x, sigma, feature, params):
        """Per-key-frequency reflection gains in (0, 1), shape (H, n_keys).

        feature is the fused neighborhood feature F(x, Sigma); pass zeros of
        width fuse_dim to run without visual conditioning.
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        enc = ipe_encode(x, sigma, self.ipe)
        inp = ad.concat([enc, feature], axis=-1)
        hdn = ad.relu(_linear(inp, params["refl.head.l1.W"],
                              params["refl.head.l1.b"]))
        hdn = ad.relu(_linear(hdn, params["refl.head.l2.W"],
                              params["refl.head.l2.b"]))
        hdn = ad.relu(_linear(hdn, params["refl.head.l3.W"],
                              params["refl.head.l3.b"]))
        return ad.sigmoid(_linear(hdn, params["refl.head.l4.W"],
                                  params["refl.head.l4.b"]))

    def patch_features(self, x, sigma, bank, basis_points, params,
                       fused=None):
        """F(x, Sigma) for query patches; zeros when no bank is attached."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if bank is None:
            return np.zeros((len(x), self.fuse_dim))
        if fused is None:
            fused = self.aggregate_all(bank, basis_points, params)
        return self.fuse_neighborhood(x, sigma, fused, basis_points, params)

    def reflection_at(self, x, sigma, bank, basis_points, params, fused=None):
        """End-to-end gains for query patches (aggregation + fusion + head)."""
        feat = self.patch_features(x, sigma, bank, basis_points, params,
                                   fused=fused)
        return self.reflection_response(x, sigma, feat, params)
