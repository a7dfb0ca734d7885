"""Semi-realistic synthetic scenes with known abundances.

A scene is built in three passes: draw a per-class subset of library
spectra, derive sparse abundances (either by unmixing a template image
against that subset or by Dirichlet draws), then mix per-pixel endmember
picks from the subset with the linear mixing model.

The template pass uses fully constrained least squares in place of a
set-based unmixer; only the abundance pattern is taken from it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.optimize import nnls

from .core import AbundanceMatrix, PixelBlock, SpectralLibrary, ValidationError

#: Reduced-library class sizes of the 4 m scene (turfgrass, NPV, paved, roof, soil, tree).
REDUCED_COUNTS_4M = (5, 7, 17, 16, 5, 45)


@dataclass(frozen=True)
class SynthSpec:
    counts: tuple[int, ...]
    max_active: int = 3
    source: str = "template"  # or "dirichlet"
    concentration: float = 1.0
    rows: int = 64
    cols: int = 64
    noise_sd: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        if not self.counts or min(self.counts) < 1:
            raise ValidationError(f"per-class counts must be >= 1, got {self.counts}")
        if self.max_active < 1:
            raise ValidationError("max_active must be >= 1")
        if self.source not in ("template", "dirichlet"):
            raise ValidationError(f"unknown abundance source {self.source!r}")
        if self.concentration <= 0 or self.noise_sd < 0 or self.rows < 1 or self.cols < 1:
            raise ValidationError("concentration, image size must be positive and noise_sd >= 0")

    @classmethod
    def from_json(cls, obj: dict) -> "SynthSpec":
        return cls(**{k: tuple(v) if k == "counts" else v for k, v in obj.items()})

    def to_json(self) -> dict:
        return {
            "counts": list(self.counts),
            "max_active": self.max_active,
            "source": self.source,
            "concentration": self.concentration,
            "rows": self.rows,
            "cols": self.cols,
            "noise_sd": self.noise_sd,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class SyntheticScene:
    pixels: PixelBlock
    truth: AbundanceMatrix
    picks: np.ndarray  # (N, M) index into each class's sampled set
    sampled: tuple[np.ndarray, ...]  # library row indices chosen per class

    def endmembers(self, library: SpectralLibrary) -> list[np.ndarray]:
        return [library.spectra[j][idx] for j, idx in enumerate(self.sampled)]


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("sets", "abundance", "picks", "noise")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.Generator(np.random.Philox(c)) for n, c in zip(names, children)}


def sample_endmember_sets(
    library: SpectralLibrary, counts: Sequence[int], rng: np.random.Generator | int
) -> tuple[np.ndarray, ...]:
    """Row indices of a uniform without-replacement sample per class (sorted)."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    if len(counts) != library.n_classes:
        raise ValidationError(f"{len(counts)} counts for {library.n_classes} classes")
    out = []
    for name, n_j, c in zip(library.names, library.counts, counts):
        if c > n_j:
            raise ValidationError(f"cannot sample {c} spectra from class {name!r} with {n_j}")
        out.append(np.sort(rng.choice(n_j, size=int(c), replace=False)))
    return tuple(out)


def fcls(pixels: np.ndarray, endmembers: np.ndarray, delta: float | None = None) -> np.ndarray:
    """Fully constrained least squares (nonnegative, sum-to-one) per pixel.

    ``endmembers`` is ``(P, B)``. The sum-to-one constraint enters as an
    extra heavily weighted row of ones; results are renormalized exactly.
    """
    E = np.asarray(endmembers, dtype=np.float64)
    Y = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    if delta is None:
        delta = 1e3 * max(float(np.abs(E).max()), 1e-12)
    Aug = np.vstack([E.T, np.full((1, E.shape[0]), delta)])
    out = np.empty((Y.shape[0], E.shape[0]))
    rhs = np.empty(E.shape[1] + 1)
    rhs[-1] = delta
    for n, y in enumerate(Y):
        rhs[:-1] = y
        x, _ = nnls(Aug, rhs, maxiter=50 * E.shape[0])
        s = x.sum()
        out[n] = x / s if s > 0 else np.full(E.shape[0], 1.0 / E.shape[0])
    return out


def keep_top(A: np.ndarray, max_active: int) -> np.ndarray:
    """Zero all but the ``max_active`` largest entries per row and rescale to sum one."""
    A = np.asarray(A, dtype=np.float64)
    if max_active >= A.shape[1]:
        return A / A.sum(axis=1, keepdims=True)
    order = np.argsort(-A, axis=1, kind="stable")
    keep = np.zeros_like(A, dtype=bool)
    np.put_along_axis(keep, order[:, :max_active], True, axis=1)
    out = np.where(keep, A, 0.0)
    return out / out.sum(axis=1, keepdims=True)


def sparse_abundances_from_template(
    template: PixelBlock,
    sets: Sequence[np.ndarray],
    max_active: int = 3,
    class_names: Sequence[str] | None = None,
) -> AbundanceMatrix:
    """Class abundances of each template pixel against the sampled spectra, top-``max_active`` only."""
    stack = np.vstack(sets)
    if stack.shape[1] != template.band_count:
        raise ValidationError("template bands do not match the sampled spectra")
    owner = np.concatenate([np.full(len(s), j) for j, s in enumerate(sets)])
    coef = fcls(template.pixels, stack)
    totals = np.zeros((template.n_pixels, len(sets)))
    for j in range(len(sets)):
        totals[:, j] = coef[:, owner == j].sum(axis=1)
    return AbundanceMatrix(keep_top(totals, max_active), None if class_names is None else tuple(class_names))


def draw_picks(set_sizes: Sequence[int], n_pixels: int, rng: np.random.Generator) -> np.ndarray:
    return np.column_stack([rng.integers(0, s, size=n_pixels) for s in set_sizes]).astype(np.intp)


def mix_pixels(
    A: np.ndarray,
    sets: Sequence[np.ndarray],
    picks: np.ndarray,
    noise_sd: float = 0.0,
    rng: np.random.Generator | None = None,
    shape: tuple[int, int] | None = None,
) -> PixelBlock:
    """``y_n = sum_j alpha_nj * sets[j][picks[n, j]] + noise``."""
    A = np.asarray(A, dtype=np.float64)
    Y = np.zeros((A.shape[0], sets[0].shape[1]))
    for j, S in enumerate(sets):
        Y += A[:, j, None] * S[picks[:, j]]
    if noise_sd > 0:
        if rng is None:
            raise ValidationError("noise requires a random generator")
        Y += rng.normal(0.0, noise_sd, size=Y.shape)
    return PixelBlock(Y, shape)


def dirichlet_abundances(
    n_pixels: int, n_classes: int, concentration: float, max_active: int, rng: np.random.Generator
) -> np.ndarray:
    raw = rng.dirichlet(np.full(n_classes, concentration), size=n_pixels)
    # Very small concentrations can underflow every entry of a row to zero.
    empty = raw.sum(axis=1) <= 0
    if np.any(empty):
        raw[empty, rng.integers(0, n_classes, size=int(empty.sum()))] = 1.0
    return keep_top(raw, max_active)


def generate(
    spec: SynthSpec, library: SpectralLibrary, template: PixelBlock | None = None
) -> SyntheticScene:
    streams = _streams(spec.seed)
    sampled = sample_endmember_sets(library, spec.counts, streams["sets"])
    sets = [library.spectra[j][idx] for j, idx in enumerate(sampled)]
    if spec.source == "template":
        if template is None:
            raise ValidationError("template mode needs a template image")
        A = sparse_abundances_from_template(template, sets, spec.max_active).values
        shape = template.shape
    else:
        n = spec.rows * spec.cols
        A = dirichlet_abundances(n, library.n_classes, spec.concentration, spec.max_active, streams["abundance"])
        shape = (spec.rows, spec.cols)
    picks = draw_picks([len(s) for s in sets], A.shape[0], streams["picks"])
    pixels = mix_pixels(A, sets, picks, spec.noise_sd, streams["noise"], shape)
    return SyntheticScene(pixels, AbundanceMatrix(A, library.names), picks, sampled)


def make_template(
    library: SpectralLibrary, rows: int, cols: int, seed: int, smoothness: float = 6.0
) -> PixelBlock:
    """Spatially smooth mixture image standing in for a real scene.

    Each class gets a Gaussian-filtered random field; a sharpened softmax
    over the fields gives patchy abundances that mix the class means.
    """
    rng = np.random.default_rng(seed)
    M = library.n_classes
    fields = np.stack([gaussian_filter(rng.normal(size=(rows, cols)), smoothness, mode="wrap") for _ in range(M)])
    fields /= fields.std(axis=(1, 2), keepdims=True)
    logits = 3.0 * fields.reshape(M, -1).T
    A = np.exp(logits - logits.max(axis=1, keepdims=True))
    A /= A.sum(axis=1, keepdims=True)
    means = np.array([b.mean(axis=0) for b in library.spectra])
    return PixelBlock(A @ means, (rows, cols))


def bimodal_library(
    n_classes: int = 4,
    per_class: int = 200,
    bands: int = 50,
    seed: int = 0,
    mode_shift: float = 0.12,
    spread: float = 0.01,
    names: Sequence[str] | None = None,
) -> SpectralLibrary:
    """Smooth reflectance-like library whose classes each have two distinct modes.

    Mode 2 of every class is mode 1 plus a smooth class-specific offset of
    amplitude ``mode_shift``; spectra scatter around their mode with smooth
    perturbations of size ``spread``.
    """
    rng = np.random.default_rng(seed)
    wl = np.linspace(0.0, 1.0, bands)

    n_basis = 16
    basis = np.array([np.cos(np.pi * i * wl) / (1.0 + 0.25 * i) for i in range(n_basis)])
    norm = np.sqrt(np.mean(np.sum(basis**2, axis=0)))

    def smooth(scale: float) -> np.ndarray:
        return scale * (rng.normal(size=n_basis) @ basis) / norm

    blocks = []
    for _ in range(n_classes):
        base = 0.35 + smooth(0.12)
        offset = smooth(mode_shift)
        modes = (base, base + offset)
        labels = rng.integers(0, 2, size=per_class)
        rows = []
        for lab in labels:
            rows.append(modes[lab] + smooth(spread))
        blocks.append(np.clip(np.array(rows), 0.0, 1.0))
    names = tuple(names) if names is not None else tuple(f"class_{j}" for j in range(n_classes))
    return SpectralLibrary(names, tuple(blocks))
