"""Per-class Gaussian mixture fitting and CVIC component-count selection."""

from __future__ import annotations

import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .core import GaussianComponent, GmmBundle, ProjectionModel, SpectralLibrary, ValidationError
from .projection import project

log = logging.getLogger(__name__)

EM_TOL = 1e-6
EM_MAX_ITER = 500
REG_SCALE = 1e-6
KMEANS_ITERS = 10
MONOTONE_SLACK = 1e-8


@dataclass(frozen=True)
class CvicConfig:
    folds: int = 5
    candidates: tuple[int, ...] = (1, 2, 3, 4)
    threshold: float = 0.0
    repeats: int = 15
    seed: int = 0

    def __post_init__(self) -> None:
        cands = tuple(int(k) for k in self.candidates)
        object.__setattr__(self, "candidates", cands)
        if self.folds < 2:
            raise ValidationError(f"need at least 2 folds, got {self.folds}")
        if not cands or any(b <= a for a, b in zip(cands, cands[1:])) or cands[0] < 1:
            raise ValidationError(f"candidate counts must be positive and strictly increasing: {cands}")
        if not (0.0 <= self.threshold < 1.0):
            raise ValidationError(f"threshold must lie in [0, 1), got {self.threshold}")
        if self.repeats < 1:
            raise ValidationError("repeats must be >= 1")


@dataclass
class CvicResult:
    class_names: tuple[str, ...]
    candidates: tuple[int, ...]
    # scores[r][j][i]: repeat r, class j, candidate i
    scores: list[list[list[float]]]
    repeat_choices: list[tuple[int, ...]]
    chosen: tuple[int, ...]
    config: CvicConfig = field(default_factory=CvicConfig)

    def to_json(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "candidates": list(self.candidates),
            "threshold": self.config.threshold,
            "folds": self.config.folds,
            "repeats": self.config.repeats,
            "seed": self.config.seed,
            "scores": self.scores,
            "repeat_choices": [list(t) for t in self.repeat_choices],
            "chosen": list(self.chosen),
        }


@dataclass
class EmTrace:
    log_likelihood: list[float] = field(default_factory=list)
    reinitialized: list[bool] = field(default_factory=list)
    converged: bool = False


def regularization(X: np.ndarray) -> float:
    """Ridge added to every covariance: 1e-6 * trace(sample covariance) / d."""
    d = X.shape[1]
    tr = float(np.sum(np.var(X, axis=0)))
    eps = REG_SCALE * tr / d
    return eps if eps > 0 else REG_SCALE


def _gaussian_logpdf(X: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    L = np.linalg.cholesky(cov)
    z = np.linalg.solve(L, (X - mean).T)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return -0.5 * (X.shape[1] * np.log(2 * np.pi) + logdet + np.sum(z * z, axis=0))


def _log_joint(X: np.ndarray, weights, means, covs) -> np.ndarray:
    return np.column_stack(
        [np.log(w) + _gaussian_logpdf(X, m, c) for w, m, c in zip(weights, means, covs)]
    )


def mixture_logpdf(X: np.ndarray, components: Sequence[GaussianComponent]) -> np.ndarray:
    """Per-row log density of a fitted mixture."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    lj = _log_joint(
        X,
        [c.weight for c in components],
        [c.mean for c in components],
        [c.covariance for c in components],
    )
    return logsumexp(lj, axis=1)


def _kmeans_pp(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.array(centers)


def _kmeans(X: np.ndarray, centers: np.ndarray, iters: int) -> np.ndarray:
    labels = np.zeros(X.shape[0], dtype=np.int64)
    for _ in range(iters):
        dist = np.sum((X[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        labels = np.argmin(dist, axis=1)
        for k in range(centers.shape[0]):
            members = X[labels == k]
            if len(members):
                centers[k] = members.mean(axis=0)
    return labels


def _m_step(X: np.ndarray, resp: np.ndarray, eps: float):
    nk = resp.sum(axis=0)
    weights = nk / X.shape[0]
    safe = np.maximum(nk, np.finfo(float).tiny)
    means = (resp.T @ X) / safe[:, None]
    covs = []
    d = X.shape[1]
    for k in range(resp.shape[1]):
        diff = X - means[k]
        c = (resp[:, k, None] * diff).T @ diff / safe[k]
        covs.append(0.5 * (c + c.T) + eps * np.eye(d))
    return weights, means, np.array(covs), nk


def fit_gmm_em(
    X: np.ndarray,
    K: int,
    seed: int = 0,
    tol: float = EM_TOL,
    max_iter: int = EM_MAX_ITER,
    reg: float | None = None,
    trace: EmTrace | None = None,
) -> list[GaussianComponent]:
    """Fit a ``K``-component full-covariance mixture by EM.

    Initialization is k-means++ seeding followed by ten Lloyd iterations.
    Every covariance update gets ``reg * I`` added (default
    :func:`regularization`). A component whose effective count drops below
    ``min(2, N/K)`` is re-seeded at the point farthest from all other
    component means, with the pooled covariance and weight ``1/K``.
    Iteration stops once the relative change in log-likelihood is below
    ``tol``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValidationError("fit_gmm_em expects a 2-D matrix")
    n, d = X.shape
    if K < 1:
        raise ValidationError("K must be >= 1")
    if K > n:
        raise ValidationError(f"cannot fit {K} components to {n} points")
    eps = regularization(X) if reg is None else float(reg)
    rng = np.random.default_rng(seed)
    trace = trace if trace is not None else EmTrace()

    if K == 1:
        mean = X.mean(axis=0)
        diff = X - mean
        cov = diff.T @ diff / n
        cov = 0.5 * (cov + cov.T) + eps * np.eye(d)
        ll = float(np.sum(_gaussian_logpdf(X, mean, cov)))
        trace.log_likelihood.append(ll)
        trace.reinitialized.append(False)
        trace.converged = True
        return [GaussianComponent(1.0, mean, cov)]

    centers = _kmeans_pp(X, K, rng)
    labels = _kmeans(X, centers, KMEANS_ITERS)
    resp = np.zeros((n, K))
    resp[np.arange(n), labels] = 1.0
    pooled = np.cov(X, rowvar=False, bias=True).reshape(d, d) + eps * np.eye(d)
    min_count = min(2.0, n / K)

    prev = -np.inf
    weights = means = covs = None
    for it in range(max_iter):
        weights, means, covs, nk = _m_step(X, resp, eps)
        reinit = False
        for k in np.flatnonzero(nk + 1e-9 < min_count):
            others = np.delete(means, k, axis=0)
            dist = np.min(np.sum((X[:, None, :] - others[None, :, :]) ** 2, axis=2), axis=1)
            means[k] = X[int(np.argmax(dist))]
            covs[k] = pooled
            weights[k] = 1.0 / K
            reinit = True
        weights = weights / weights.sum()
        lj = _log_joint(X, weights, means, covs)
        norm = logsumexp(lj, axis=1)
        ll = float(np.sum(norm))
        resp = np.exp(lj - norm[:, None])
        trace.log_likelihood.append(ll)
        trace.reinitialized.append(reinit)
        if __debug__ and not reinit and it > 0 and not trace.reinitialized[-2]:
            if ll < prev - MONOTONE_SLACK * max(1.0, abs(prev)):
                log.debug("EM log-likelihood decreased from %r to %r", prev, ll)
        if not reinit and np.isfinite(prev) and abs(ll - prev) <= tol * max(abs(prev), 1e-300):
            trace.converged = True
            break
        prev = ll
    # Final parameters are the ones the last responsibilities were computed from.
    return [GaussianComponent(float(w), m, c) for w, m, c in zip(weights, means, covs)]


def fold_labels(n: int, folds: int, seed: int) -> np.ndarray:
    """Near-equal fold assignment after a seeded shuffle."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % folds
    return labels[rng.permutation(n)]


def cvic_fold_scores(
    X: np.ndarray,
    K: int,
    folds: int = 5,
    seed: int = 0,
    labels: np.ndarray | None = None,
    **em_kwargs,
) -> np.ndarray:
    """Held-out log-likelihood of every fold, each fit on the other folds."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if labels is None:
        if n < folds:
            raise ValidationError(f"need at least {folds} points for {folds}-fold CVIC, got {n}")
        labels = fold_labels(n, folds, seed)
    labels = np.asarray(labels)
    out = np.empty(folds)
    for v in range(folds):
        held = labels == v
        if not held.any():
            raise ValidationError(f"fold {v} has no points")
        comps = fit_gmm_em(X[~held], K, seed=seed, **em_kwargs)
        out[v] = float(np.sum(mixture_logpdf(X[held], comps)))
    return out


def cvic_score(X: np.ndarray, K: int, folds: int = 5, seed: int = 0, **kwargs) -> float:
    """Cross-validated log-likelihood ``L_K`` (sum of held-out fold scores)."""
    return float(np.sum(cvic_fold_scores(X, K, folds, seed, **kwargs)))


def choose_count(scores: Sequence[float], candidates: Sequence[int], threshold: float) -> int:
    """Smallest candidate with ``|L_K - L'| <= threshold * |L'|`` where ``L' = max L_K``."""
    scores = np.asarray(scores, dtype=np.float64)
    best = float(np.max(scores))
    for k, s in zip(candidates, scores):
        if abs(s - best) <= threshold * abs(best):
            return int(k)
    raise AssertionError("the maximizer always satisfies the threshold rule")


def modal_tuple(choices: Sequence[tuple[int, ...]]) -> tuple[int, ...]:
    """Most frequent tuple; ties go to the lexicographically smallest."""
    counts = Counter(choices)
    top = max(counts.values())
    return min(t for t, c in counts.items() if c == top)


def _class_scores(X, config: CvicConfig, seed: int) -> list[float]:
    n = X.shape[0]
    smallest_train = n - -(-n // config.folds)
    scores = []
    for K in config.candidates:
        if K > smallest_train:
            scores.append(-np.inf)
            continue
        scores.append(cvic_score(X, K, config.folds, seed))
    return scores


def select_components(
    projected: Sequence[np.ndarray],
    config: CvicConfig,
    class_names: Sequence[str] | None = None,
    threads: int = 1,
) -> CvicResult:
    """Run CVIC ``config.repeats`` times and keep the modal K tuple.

    Repeat ``r`` uses seed ``config.seed + r`` for the fold shuffle and the
    EM initialization. Candidates too large for a training fold score
    ``-inf``. Work is spread over ``threads`` workers but results are
    collected in (repeat, class) order, so the output does not depend on it.
    """
    names = tuple(class_names) if class_names is not None else tuple(
        f"class_{j}" for j in range(len(projected))
    )
    for name, X in zip(names, projected):
        if X.shape[0] < config.folds:
            raise ValidationError(
                f"class {name!r} has {X.shape[0]} spectra, fewer than {config.folds} folds"
            )
    jobs = [(r, j) for r in range(config.repeats) for j in range(len(projected))]

    def run(job):
        r, j = job
        return _class_scores(projected[j], config, config.seed + r)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]

    scores: list[list[list[float]]] = []
    choices: list[tuple[int, ...]] = []
    it = iter(results)
    for r in range(config.repeats):
        per_class = [next(it) for _ in projected]
        scores.append(per_class)
        choices.append(tuple(choose_count(s, config.candidates, config.threshold) for s in per_class))
        log.info("CVIC repeat %d chose %s", r, choices[-1])
    return CvicResult(names, config.candidates, scores, choices, modal_tuple(choices), config)


def fit_bundle(
    library: SpectralLibrary,
    projection: ProjectionModel,
    counts: Sequence[int],
    seed: int = 0,
    noise_covariance: np.ndarray | None = None,
    threads: int = 1,
) -> GmmBundle:
    """Fit every class on its full projected spectra with the chosen counts."""
    if len(counts) != library.n_classes:
        raise ValidationError(f"{len(counts)} component counts for {library.n_classes} classes")
    blocks = [project(projection, b) for b in library.spectra]

    def run(j):
        return tuple(fit_gmm_em(blocks[j], int(counts[j]), seed=seed + j))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_class = tuple(pool.map(run, range(library.n_classes)))
    else:
        per_class = tuple(run(j) for j in range(library.n_classes))
    return GmmBundle(library.names, per_class, projection, noise_covariance)
