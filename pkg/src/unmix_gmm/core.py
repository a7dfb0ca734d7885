"""Domain types shared across the package.

All containers are frozen dataclasses holding read-only float64 arrays, so
instances can be shared freely between threads. Class order inside a
:class:`SpectralLibrary` fixes the abundance column order everywhere
downstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

FloatArray = NDArray[np.float64]

#: Noise standard deviation of the default noise covariance ``D = s**2 * I``.
DEFAULT_NOISE_SD = 0.001

WEIGHT_SUM_TOL = 1e-10
SIMPLEX_TOL = 1e-9
ORTHONORMAL_TOL = 1e-10


class ValidationError(ValueError):
    """Raised when an input violates a type invariant."""


class NumericalError(ArithmeticError):
    """Raised when a computation meets a non positive-definite covariance."""


def _frozen(values, *, ndim: int, name: str) -> FloatArray:
    arr = np.array(values, dtype=np.float64, copy=True)
    if arr.ndim != ndim:
        raise ValidationError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains NaN or Inf")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Spectrum:
    values: FloatArray

    def __post_init__(self) -> None:
        arr = _frozen(self.values, ndim=1, name="spectrum")
        if arr.size == 0:
            raise ValidationError("spectrum must have at least one band")
        object.__setattr__(self, "values", arr)

    @property
    def band_count(self) -> int:
        return int(self.values.size)


@dataclass(frozen=True, eq=False)
class SpectralLibrary:
    """Labeled endmember spectra, one ``(N_j, B)`` block per class."""

    names: tuple[str, ...]
    spectra: tuple[FloatArray, ...]

    def __post_init__(self) -> None:
        names = tuple(str(n) for n in self.names)
        if len(names) == 0:
            raise ValidationError("library needs at least one class")
        if len(set(names)) != len(names):
            raise ValidationError(f"duplicate class names in {names}")
        if len(self.spectra) != len(names):
            raise ValidationError("one spectra block per class name is required")
        blocks = []
        for name, block in zip(names, self.spectra):
            arr = _frozen(block, ndim=2, name=f"spectra of class {name!r}")
            if arr.shape[0] < 1:
                raise ValidationError(f"class {name!r} has no spectra")
            blocks.append(arr)
        bands = {b.shape[1] for b in blocks}
        if len(bands) != 1 or 0 in bands:
            raise ValidationError(f"all spectra must share a positive band count, got {sorted(bands)}")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "spectra", tuple(blocks))

    @classmethod
    def from_mapping(cls, classes: dict[str, FloatArray]) -> "SpectralLibrary":
        return cls(tuple(classes), tuple(classes.values()))

    @property
    def n_classes(self) -> int:
        return len(self.names)

    @property
    def band_count(self) -> int:
        return int(self.spectra[0].shape[1])

    @property
    def counts(self) -> tuple[int, ...]:
        return tuple(int(b.shape[0]) for b in self.spectra)

    def stacked(self) -> tuple[FloatArray, NDArray[np.int64]]:
        """All spectra in one matrix plus the class index of every row."""
        labels = np.concatenate([np.full(n, j, dtype=np.int64) for j, n in enumerate(self.counts)])
        return np.vstack(self.spectra), labels

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SpectralLibrary):
            return NotImplemented
        return self.names == other.names and all(
            np.array_equal(a, b) for a, b in zip(self.spectra, other.spectra)
        )


@dataclass(frozen=True, eq=False)
class PixelBlock:
    pixels: FloatArray
    shape: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        arr = _frozen(self.pixels, ndim=2, name="pixels")
        object.__setattr__(self, "pixels", arr)
        if self.shape is not None:
            rows, cols = (int(s) for s in self.shape)
            if rows * cols != arr.shape[0]:
                raise ValidationError(
                    f"image shape {rows}x{cols} does not match {arr.shape[0]} pixels"
                )
            object.__setattr__(self, "shape", (rows, cols))

    @property
    def n_pixels(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def band_count(self) -> int:
        return int(self.pixels.shape[1])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PixelBlock):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.pixels, other.pixels)


@dataclass(frozen=True, eq=False)
class GaussianComponent:
    weight: float
    mean: FloatArray
    covariance: FloatArray

    def __post_init__(self) -> None:
        w = float(self.weight)
        if not (0.0 < w <= 1.0):
            raise ValidationError(f"component weight must lie in (0, 1], got {w}")
        mean = _frozen(self.mean, ndim=1, name="component mean")
        cov = _frozen(self.covariance, ndim=2, name="component covariance")
        d = mean.size
        if cov.shape != (d, d):
            raise ValidationError(f"covariance shape {cov.shape} does not match mean length {d}")
        if not np.array_equal(cov, cov.T):
            if not np.allclose(cov, cov.T, rtol=1e-12, atol=1e-15):
                raise ValidationError("component covariance is not symmetric")
            cov = 0.5 * (cov + cov.T)
            cov.setflags(write=False)
        if np.linalg.eigvalsh(cov)[0] <= 0.0:
            raise ValidationError("component covariance is not positive definite")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def dim(self) -> int:
        return int(self.mean.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GaussianComponent):
            return NotImplemented
        return (
            self.weight == other.weight
            and np.array_equal(self.mean, other.mean)
            and np.array_equal(self.covariance, other.covariance)
        )


@dataclass(frozen=True, eq=False)
class ProjectionModel:
    """Affine map ``x -> basis.T @ (x - center)`` onto ``d`` principal axes."""

    center: FloatArray
    basis: FloatArray

    def __post_init__(self) -> None:
        center = _frozen(self.center, ndim=1, name="projection center")
        basis = _frozen(self.basis, ndim=2, name="projection basis")
        if basis.shape[0] != center.size:
            raise ValidationError(
                f"basis has {basis.shape[0]} rows but center has {center.size} bands"
            )
        if basis.shape[1] < 1 or basis.shape[1] > basis.shape[0]:
            raise ValidationError(f"invalid basis shape {basis.shape}")
        gram = basis.T @ basis
        err = np.max(np.abs(gram - np.eye(basis.shape[1])))
        if err > ORTHONORMAL_TOL:
            raise ValidationError(f"basis columns are not orthonormal (max |E^T E - I| = {err:.3g})")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "basis", basis)

    @classmethod
    def identity(cls, dim: int) -> "ProjectionModel":
        """Pass-through projection for data that already lives in ``R^dim``."""
        return cls(np.zeros(dim), np.eye(dim))

    @property
    def band_count(self) -> int:
        return int(self.center.size)

    @property
    def dim(self) -> int:
        return int(self.basis.shape[1])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ProjectionModel):
            return NotImplemented
        return np.array_equal(self.center, other.center) and np.array_equal(self.basis, other.basis)


def default_noise_covariance(dim: int) -> FloatArray:
    # E^T (s^2 I_B) E = s^2 I_d exactly for orthonormal E.
    return DEFAULT_NOISE_SD**2 * np.eye(dim)


@dataclass(frozen=True, eq=False)
class GmmBundle:
    """Fitted per-class mixtures plus noise covariance and projection."""

    class_names: tuple[str, ...]
    per_class: tuple[tuple[GaussianComponent, ...], ...]
    projection: ProjectionModel
    noise_covariance: FloatArray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        names = tuple(str(n) for n in self.class_names)
        if len(set(names)) != len(names):
            raise ValidationError(f"duplicate class names in {names}")
        per_class = tuple(tuple(c) for c in self.per_class)
        if len(per_class) != len(names) or not names:
            raise ValidationError("per_class must hold one component list per class")
        d = self.projection.dim
        for name, comps in zip(names, per_class):
            if not comps:
                raise ValidationError(f"class {name!r} has no components")
            if any(c.dim != d for c in comps):
                raise ValidationError(
                    f"components of class {name!r} do not match projection dimension {d}"
                )
            total = math.fsum(c.weight for c in comps)
            if abs(total - 1.0) > WEIGHT_SUM_TOL:
                raise ValidationError(
                    f"weights of class {name!r} sum to {total!r}, expected 1 within {WEIGHT_SUM_TOL}"
                )
        noise = self.noise_covariance
        noise = default_noise_covariance(d) if noise is None else noise
        noise = _frozen(noise, ndim=2, name="noise covariance")
        if noise.shape != (d, d):
            raise ValidationError(f"noise covariance must be {d}x{d}, got {noise.shape}")
        if not np.allclose(noise, noise.T, rtol=0, atol=1e-15):
            raise ValidationError("noise covariance is not symmetric")
        if np.linalg.eigvalsh(noise)[0] < 0.0:
            raise ValidationError("noise covariance is not positive semidefinite")
        object.__setattr__(self, "class_names", names)
        object.__setattr__(self, "per_class", per_class)
        object.__setattr__(self, "noise_covariance", noise)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def dim(self) -> int:
        return self.projection.dim

    @property
    def component_counts(self) -> tuple[int, ...]:
        return tuple(len(c) for c in self.per_class)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GmmBundle):
            return NotImplemented
        return (
            self.class_names == other.class_names
            and self.per_class == other.per_class
            and self.projection == other.projection
            and np.array_equal(self.noise_covariance, other.noise_covariance)
        )


@dataclass(frozen=True, eq=False)
class AbundanceMatrix:
    """``N x M`` abundances whose rows lie on the probability simplex."""

    values: FloatArray
    class_names: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        arr = _frozen(self.values, ndim=2, name="abundances")
        if np.any(arr < 0.0):
            raise ValidationError(f"negative abundance {arr.min()!r}")
        row_err = np.abs(arr.sum(axis=1) - 1.0)
        if row_err.size and row_err.max() > SIMPLEX_TOL:
            bad = int(np.argmax(row_err))
            raise ValidationError(f"row {bad} sums to {arr[bad].sum()!r}, not 1")
        object.__setattr__(self, "values", arr)
        if self.class_names is not None:
            names = tuple(str(n) for n in self.class_names)
            if len(names) != arr.shape[1]:
                raise ValidationError(f"{len(names)} class names for {arr.shape[1]} columns")
            object.__setattr__(self, "class_names", names)

    @property
    def n_pixels(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_classes(self) -> int:
        return int(self.values.shape[1])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AbundanceMatrix):
            return NotImplemented
        return self.class_names == other.class_names and np.array_equal(self.values, other.values)


@dataclass(frozen=True)
class MixtureCombination:
    """One pick of component index per class (0-based) and its joint prior."""

    indices: tuple[int, ...]
    prior: float


def combination_priors_ok(combos: Sequence[MixtureCombination]) -> bool:
    return abs(math.fsum(c.prior for c in combos) - 1.0) <= SIMPLEX_TOL
