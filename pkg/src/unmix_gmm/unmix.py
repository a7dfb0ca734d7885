"""Abundance estimation under the Gaussian-mixture pixel model.

A pixel ``y_n`` with abundances ``alpha_n`` is distributed as
``sum_k pi_k N(y_n | mu_nk, Sigma_nk)`` over all component combinations
``k``, with ``mu_nk = sum_j alpha_nj mu_{j,k_j}`` and
``Sigma_nk = sum_j alpha_nj**2 Sigma_{j,k_j} + D``. The negative
log-likelihood is minimized by generalized EM: responsibilities in closed
form, then projected-gradient steps on the simplex that only need to lower
the surrogate objective.

Combination indices are 0-based throughout.
"""

from __future__ import annotations

import itertools
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp

from ._backend import kernels
from .core import AbundanceMatrix, GmmBundle, MixtureCombination, NumericalError, PixelBlock, ValidationError
from .projection import project

log = logging.getLogger(__name__)

DEFAULT_MAX_COMBINATIONS = 10_000


class TooManyCombinations(ValidationError):
    pass


def resolve_threads(threads: int | None = None) -> int:
    if threads is None:
        env = os.environ.get("UNMIX_GMM_THREADS")
        threads = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(threads))


@dataclass(frozen=True)
class CombinationTable:
    """Flattened bundle parameters in the layout the kernels consume.

    ``combos[k, j]`` indexes rows of ``comp_means`` / ``comp_covs``.
    """

    comp_means: np.ndarray  # (C, d)
    comp_covs: np.ndarray  # (C, d, d)
    combos: np.ndarray  # (|K|, M)
    local: np.ndarray  # (|K|, M) per-class component index
    priors: np.ndarray  # (|K|,)
    log_priors: np.ndarray
    noise: np.ndarray  # (d, d)

    @classmethod
    def from_bundle(cls, bundle: GmmBundle, cap: int = DEFAULT_MAX_COMBINATIONS) -> "CombinationTable":
        counts = bundle.component_counts
        total = math.prod(counts)
        if total > cap:
            raise TooManyCombinations(
                f"{total} component combinations exceed the cap of {cap}; "
                "use a larger CVIC threshold to select fewer components"
            )
        offsets = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.intp)
        comps = [c for cls_comps in bundle.per_class for c in cls_comps]
        local = np.array(list(itertools.product(*[range(k) for k in counts])), dtype=np.intp)
        local = local.reshape(total, len(counts))
        weights = [np.array([c.weight for c in cc]) for cc in bundle.per_class]
        priors = np.ones(total)
        for j, w in enumerate(weights):
            priors = priors * w[local[:, j]]
        return cls(
            comp_means=np.array([c.mean for c in comps]),
            comp_covs=np.array([c.covariance for c in comps]),
            combos=np.ascontiguousarray(local + offsets),
            local=local,
            priors=priors,
            log_priors=np.log(priors),
            noise=np.ascontiguousarray(bundle.noise_covariance),
        )

    @property
    def n_combinations(self) -> int:
        return int(self.combos.shape[0])

    @property
    def dim(self) -> int:
        return int(self.comp_means.shape[1])

    def R(self, k: int) -> np.ndarray:
        """Stacked component means of combination ``k`` (M x d)."""
        return self.comp_means[self.combos[k]]

    def S(self, k: int) -> np.ndarray:
        """Vectorized component covariances of combination ``k`` (M x d^2)."""
        return self.comp_covs[self.combos[k]].reshape(self.combos.shape[1], -1)


def _table(source: GmmBundle | CombinationTable) -> CombinationTable:
    return source if isinstance(source, CombinationTable) else CombinationTable.from_bundle(source)


def enumerate_combinations(
    bundle: GmmBundle, cap: int = DEFAULT_MAX_COMBINATIONS
) -> list[MixtureCombination]:
    """All component tuples in row-major (last class fastest) order with joint priors."""
    tab = CombinationTable.from_bundle(bundle, cap)
    return [
        MixtureCombination(tuple(int(i) for i in row), float(p))
        for row, p in zip(tab.local, tab.priors)
    ]


def pixel_mixture_params(alpha: np.ndarray, combination: MixtureCombination | tuple[int, ...], bundle: GmmBundle):
    """Mean and covariance of the pixel density for one combination."""
    indices = combination.indices if isinstance(combination, MixtureCombination) else combination
    alpha = np.asarray(alpha, dtype=np.float64)
    comps = [bundle.per_class[j][k] for j, k in enumerate(indices)]
    mu = sum(a * c.mean for a, c in zip(alpha, comps))
    sigma = sum(a * a * c.covariance for a, c in zip(alpha, comps)) + bundle.noise_covariance
    return np.asarray(mu), np.asarray(sigma)


def _arrays(Y, A):
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    A = np.ascontiguousarray(A, dtype=np.float64)
    if Y.ndim != 2 or A.ndim != 2 or Y.shape[0] != A.shape[0]:
        raise ValidationError(f"incompatible shapes Y{Y.shape}, A{A.shape}")
    return Y, A


def log_joint(Y, A, source, threads: int = 1) -> np.ndarray:
    tab = _table(source)
    Y, A = _arrays(Y, A)
    L = kernels.log_joint(
        Y, A, tab.comp_means, tab.comp_covs, tab.combos, tab.log_priors, tab.noise, threads
    )
    bad = ~np.isfinite(L)
    if bad.any():
        n, k = np.argwhere(bad)[0]
        raise NumericalError(
            f"non-finite log density {L[n, k]!r} for pixel {n}, combination {tuple(tab.local[k])}; "
            "covariances are too close to singular"
        )
    return L


def negative_log_likelihood(Y, A, source, threads: int = 1) -> float:
    """``-sum_n log sum_k pi_k N(y_n | mu_nk, Sigma_nk)`` via log-sum-exp."""
    return float(-np.sum(logsumexp(log_joint(Y, A, source, threads), axis=1)))


def responsibilities(L: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    logz = logsumexp(L, axis=1)
    return np.exp(L - logz[:, None]), logz


def e_step(Y, A, source, threads: int = 1) -> np.ndarray:
    """Posterior probability of every combination for every pixel (rows sum to 1)."""
    return responsibilities(log_joint(Y, A, source, threads))[0]


def m_step_objective(Y, A, gamma, source, threads: int = 1) -> float:
    """Surrogate ``-sum_nk gamma_nk (log pi_k + log N(y_n | mu_nk, Sigma_nk))``."""
    return float(-np.sum(np.asarray(gamma) * log_joint(Y, A, source, threads)))


def m_step_gradient(Y, A, gamma, source, threads: int = 1) -> np.ndarray:
    """Gradient of :func:`m_step_objective` in ``A`` with ``gamma`` frozen."""
    tab = _table(source)
    Y, A = _arrays(Y, A)
    gamma = np.ascontiguousarray(gamma, dtype=np.float64)
    return kernels.weighted_gradient(
        Y, A, tab.comp_means, tab.comp_covs, tab.combos, tab.noise, gamma, threads
    )


def project_simplex(v) -> np.ndarray:
    """Euclidean projection of a vector (or each row of a matrix) onto the simplex."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValidationError("cannot project non-finite values")
    if v.ndim == 1:
        return kernels.project_simplex_rows(v[None, :])[0]
    return kernels.project_simplex_rows(v)


def default_init_ridge(R: np.ndarray) -> float:
    return 1e-4 * float(np.trace(R @ R.T)) / R.shape[0]


def init_abundances(Y, source, ridge: float | None = None) -> np.ndarray:
    """Ridge least squares per combination, projected to the simplex.

    Each pixel keeps the candidate with the smallest reconstruction error
    against its combination's mean matrix; ties keep the lowest index.
    """
    tab = _table(source)
    Y = np.asarray(Y, dtype=np.float64)
    N = Y.shape[0]
    M = tab.combos.shape[1]
    best = np.full(N, np.inf)
    A = np.zeros((N, M))
    for k in range(tab.n_combinations):
        R = tab.R(k)
        eps = default_init_ridge(R) if ridge is None else ridge
        G = R @ R.T + eps * np.eye(M)
        alpha = project_simplex(np.linalg.solve(G, R @ Y.T).T)
        err = np.sum((Y - alpha @ R) ** 2, axis=1)
        better = err < best
        A[better] = alpha[better]
        best[better] = err[better]
    return A


@dataclass
class UnmixOptions:
    max_outer_iters: int = 100
    m_step_iters: int = 1
    initial_step: float = 1e-3
    step_growth: float = 10.0
    tol: float = 1e-6
    init_ridge: float | None = None
    max_shrinks: int = 8
    max_combinations: int = DEFAULT_MAX_COMBINATIONS
    threads: int | None = None

    def __post_init__(self) -> None:
        if self.max_outer_iters < 1 or self.m_step_iters < 1 or self.max_shrinks < 0:
            raise ValidationError("iteration counts must be positive")
        if not (self.initial_step > 0 and self.step_growth > 1 and self.tol >= 0):
            raise ValidationError("step size, growth factor and tolerance must be positive")
        if self.init_ridge is not None and self.init_ridge <= 0:
            raise ValidationError("init_ridge must be positive")


@dataclass
class UnmixDiagnostics:
    objective: list[float] = field(default_factory=list)
    accepted_pixels: list[int] = field(default_factory=list)
    step_size_geomean: list[float] = field(default_factory=list)
    n_iter: int = 0
    converged: bool = False
    warning: str | None = None
    backend: str = kernels.NAME
    n_combinations: int = 0

    def to_json(self) -> dict:
        return asdict(self)


def _m_step(Y, A, L, logz, gamma, tau, tab, opts, threads, diag_steps):
    """One projected-gradient pass with per-pixel step adaptation; updates in place."""
    em = -np.sum(gamma * L, axis=1)
    grad = m_step_gradient(Y, A, gamma, tab, threads)
    pending = np.arange(Y.shape[0])
    accepted = 0
    for _ in range(opts.max_shrinks + 1):
        if pending.size == 0:
            break
        A0 = A[pending]
        trial = project_simplex(A0 - tau[pending, None] * grad[pending])
        # phi(A - t g) == A for one t > 0 means A is stationary for every t.
        moved = np.any(trial != A0, axis=1)
        pending, trial = pending[moved], trial[moved]
        if pending.size == 0:
            break
        Lp = log_joint(Y[pending], trial, tab, threads)
        em_p = -np.sum(gamma[pending] * Lp, axis=1)
        logz_p = logsumexp(Lp, axis=1)
        ok = (em_p < em[pending]) & (logz_p >= logz[pending])
        idx = pending[ok]
        A[idx] = trial[ok]
        L[idx] = Lp[ok]
        logz[idx] = logz_p[ok]
        em[idx] = em_p[ok]
        diag_steps.append(tau[idx].copy())
        accepted += idx.size
        tau[idx] *= opts.step_growth
        pending = pending[~ok]
        tau[pending] /= opts.step_growth
    return accepted


def unmix_projected(Y, bundle: GmmBundle, options: UnmixOptions | None = None):
    """Generalized EM on pixels already mapped into the bundle's projected space."""
    opts = options or UnmixOptions()
    threads = resolve_threads(opts.threads)
    tab = CombinationTable.from_bundle(bundle, opts.max_combinations)
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[1] != tab.dim:
        raise ValidationError(f"projected pixels must have {tab.dim} columns, got shape {Y.shape}")
    diag = UnmixDiagnostics(n_combinations=tab.n_combinations)

    A = init_abundances(Y, tab, opts.init_ridge)
    L = log_joint(Y, A, tab, threads)
    gamma, logz = responsibilities(L)
    diag.objective.append(float(-np.sum(logz)))
    tau = np.full(Y.shape[0], opts.initial_step)

    for it in range(opts.max_outer_iters):
        steps: list[np.ndarray] = []
        accepted = 0
        for _ in range(opts.m_step_iters):
            accepted += _m_step(Y, A, L, logz, gamma, tau, tab, opts, threads, steps)
        gamma = np.exp(L - logz[:, None])
        prev = diag.objective[-1]
        cur = float(-np.sum(logz))
        diag.objective.append(cur)
        diag.accepted_pixels.append(int(accepted))
        flat = np.concatenate(steps) if steps else np.empty(0)
        diag.step_size_geomean.append(float(np.exp(np.mean(np.log(flat)))) if flat.size else 0.0)
        diag.n_iter = it + 1
        if accepted == 0 or (prev - cur) <= opts.tol * max(abs(prev), np.finfo(float).tiny):
            diag.converged = True
            break

    if not diag.converged:
        diag.warning = f"did not converge within {opts.max_outer_iters} outer iterations"
        log.warning(diag.warning)
    return A, diag


def unmix(
    pixels: PixelBlock | np.ndarray, bundle: GmmBundle, options: UnmixOptions | None = None
) -> tuple[AbundanceMatrix, UnmixDiagnostics]:
    """Project raw pixels with the bundle's projection and estimate abundances.

    Columns of the result follow ``bundle.class_names``. Non-convergence is
    reported through ``diagnostics.warning``, never raised.
    """
    raw = pixels.pixels if isinstance(pixels, PixelBlock) else np.asarray(pixels, dtype=np.float64)
    if raw.shape[1] != bundle.projection.band_count:
        raise ValidationError(
            f"pixels have {raw.shape[1]} bands, bundle projection expects {bundle.projection.band_count}"
        )
    A, diag = unmix_projected(project(bundle.projection, raw), bundle, options)
    return AbundanceMatrix(A, bundle.class_names), diag
