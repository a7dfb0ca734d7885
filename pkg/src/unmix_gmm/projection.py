"""PCA projection fit on a class-balanced library."""

from __future__ import annotations

import numpy as np

from .core import ProjectionModel, SpectralLibrary, ValidationError

DEFAULT_DIM = 10


def balanced_subsample(library: SpectralLibrary, seed: int) -> SpectralLibrary:
    """Draw ``min_j N_j`` spectra per class without replacement.

    Rows keep their original relative order within each class.
    """
    n_star = min(library.counts)
    rng = np.random.default_rng(seed)
    blocks = []
    for block in library.spectra:
        idx = np.sort(rng.choice(block.shape[0], size=n_star, replace=False))
        blocks.append(block[idx])
    return SpectralLibrary(library.names, tuple(blocks))


def fit_pca(spectra: np.ndarray, d: int = DEFAULT_DIM, rank_tol: float = 1e-10) -> ProjectionModel:
    """Center and top-``d`` eigenvectors of the sample covariance.

    Each basis column is flipped so that its largest-magnitude entry is
    positive, making serialized models reproducible.
    """
    X = np.asarray(spectra, dtype=np.float64)
    if X.ndim != 2:
        raise ValidationError("fit_pca expects a 2-D matrix")
    if d < 1:
        raise ValidationError(f"target dimension must be >= 1, got {d}")
    if X.shape[0] < d:
        raise ValidationError(f"need at least d={d} rows, got {X.shape[0]}")
    center = X.mean(axis=0)
    Xc = X - center
    cov = Xc.T @ Xc / max(X.shape[0] - 1, 1)
    cov = 0.5 * (cov + cov.T)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    scale = max(evals[0], 0.0) if evals.size else 0.0
    rank = int(np.sum(evals > rank_tol * scale)) if scale > 0 else 0
    if d > rank:
        raise ValidationError(f"requested d={d} exceeds the achievable rank {rank} of the input")
    basis = evecs[:, :d].copy()
    pivots = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[pivots, np.arange(d)])
    basis *= signs
    # Re-orthonormalize to push E^T E - I to rounding level.
    q, r = np.linalg.qr(basis)
    basis = q * np.sign(np.diag(r))
    return ProjectionModel(center, basis)


def fit_library_projection(
    library: SpectralLibrary, d: int = DEFAULT_DIM, seed: int = 0
) -> ProjectionModel:
    """PCA on the class-balanced library (the default projection source)."""
    balanced = balanced_subsample(library, seed)
    return fit_pca(np.vstack(balanced.spectra), d)


def fit_pixel_projection(pixels: np.ndarray, d: int = DEFAULT_DIM) -> ProjectionModel:
    """PCA on image pixels instead of the library; only sensible for large scenes."""
    return fit_pca(pixels, d)


def project(model: ProjectionModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    squeeze = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != model.band_count:
        raise ValidationError(f"data has {X.shape[1]} bands, projection expects {model.band_count}")
    out = (X - model.center) @ model.basis
    return out[0] if squeeze else out


def reconstruct(model: ProjectionModel, Z: np.ndarray) -> np.ndarray:
    return np.asarray(Z) @ model.basis.T + model.center


def project_library(model: ProjectionModel, library: SpectralLibrary) -> list[np.ndarray]:
    return [project(model, block) for block in library.spectra]
