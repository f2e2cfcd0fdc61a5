"""PCA dimensionality reduction for backbone features.

Deterministic sign convention: each principal axis is flipped so that its
largest-magnitude entry is positive, making the projection (and therefore
the written bank) reproducible across runs.
"""

from __future__ import annotations

import numpy as np

_RANK_TOL = 1e-10


class RankError(ValueError):
    pass


def fit_pca(corpus: np.ndarray, dim: int):
    """Principal axes of an (N, D) corpus.

    Returns (components (dim, D), mean (D,)).  Raises RankError when the
    corpus has fewer than `dim` samples or lacks variance in `dim`
    independent directions.
    """
    corpus = np.asarray(corpus, dtype=np.float64)
    if corpus.ndim != 2:
        raise ValueError("corpus must be (N, D)")
    n, d_in = corpus.shape
    if dim < 1 or dim > d_in:
        raise ValueError(f"target dim {dim} outside [1, {d_in}]")
    if n < dim:
        raise RankError(f"corpus has {n} samples, need >= {dim}")
    mean = corpus.mean(axis=0)
    _, s, vt = np.linalg.svd(corpus - mean, full_matrices=False)
    if (s > _RANK_TOL * max(s[0], 1.0)).sum() < dim:
        raise RankError(f"corpus rank below target dim {dim}")
    comp = vt[:dim]
    flip = np.sign(comp[np.arange(dim), np.abs(comp).argmax(axis=1)])
    return comp * flip[:, None], mean


def transform(features: np.ndarray, components: np.ndarray,
              mean: np.ndarray) -> np.ndarray:
    return (np.asarray(features, dtype=np.float64) - mean) @ components.T


def reduce_dim(features: np.ndarray, dim: int):
    """Fit PCA on `features` and project them; returns (reduced, comp, mean)."""
    comp, mean = fit_pca(features, dim)
    return transform(features, comp, mean), comp, mean


def explained_variance(corpus: np.ndarray, dim: int) -> float:
    """Fraction of total variance captured by the top `dim` axes."""
    corpus = np.asarray(corpus, dtype=np.float64)
    c = corpus - corpus.mean(axis=0)
    s2 = np.linalg.svd(c, compute_uv=False) ** 2
    return float(s2[:dim].sum() / max(s2.sum(), 1e-300))
