"""Pure-NumPy kernels, used when the compiled extension is unavailable.

The gradient follows the stacked-matrix form directly: for each combination
``k`` it builds ``Lambda_k`` (N x d) and ``Psi_k`` (N x d^2) and contracts
them with ``R_k`` (M x d) and ``S_k`` (M x d^2). The compiled kernel uses
per-pixel trace identities instead, so the two routes cross-check each other.

Everything is vectorized over pixels and runs in the calling thread; the
``threads`` argument is accepted for signature compatibility only.
"""

from __future__ import annotations

import numpy as np

from .core import NumericalError

NAME = "python"
LOG_2PI = float(np.log(2.0 * np.pi))


def _pixel_params(A, comp_means, comp_covs, idx, noise):
    mu = A @ comp_means[idx]
    sigma = noise + np.einsum("nj,jab->nab", A * A, comp_covs[idx])
    return mu, sigma


def _cholesky(sigma, k):
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        for n in range(sigma.shape[0]):
            try:
                np.linalg.cholesky(sigma[n])
            except np.linalg.LinAlgError:
                raise NumericalError(
                    f"pixel covariance not positive definite at pixel {n}, combination {k}"
                ) from None
        raise


def log_joint(Y, A, comp_means, comp_covs, combos, log_prior, noise, threads=1):
    """``log pi_k + log N(y_n | mu_nk, Sigma_nk)`` as an ``N x K`` array."""
    N, d = Y.shape
    out = np.empty((N, combos.shape[0]))
    for k in range(combos.shape[0]):
        mu, sigma = _pixel_params(A, comp_means, comp_covs, combos[k], noise)
        L = _cholesky(sigma, k)
        z = np.linalg.solve(L, (Y - mu)[:, :, None])[:, :, 0]
        logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)), axis=1)
        out[:, k] = log_prior[k] - 0.5 * (d * LOG_2PI + logdet + np.sum(z * z, axis=1))
    return out


def weighted_gradient(Y, A, comp_means, comp_covs, combos, noise, gamma, threads=1):
    """Gradient of the M-step objective with responsibilities held fixed."""
    N, d = Y.shape
    M = A.shape[1]
    grad = np.zeros((N, M))
    for k in range(combos.shape[0]):
        idx = combos[k]
        g = gamma[:, k]
        if not np.any(g):
            continue
        mu, sigma = _pixel_params(A, comp_means, comp_covs, idx, noise)
        _cholesky(sigma, k)
        inv = np.linalg.inv(sigma)
        inv = 0.5 * (inv + np.swapaxes(inv, 1, 2))
        w = np.einsum("nab,nb->na", inv, Y - mu)
        lam = g[:, None] * w
        psi = 0.5 * g[:, None, None] * (w[:, :, None] * w[:, None, :] - inv)
        R = comp_means[idx]
        S = comp_covs[idx].reshape(M, d * d)
        grad -= lam @ R.T + 2.0 * A * (psi.reshape(N, d * d) @ S.T)
    return grad


def project_simplex_rows(V):
    """Euclidean projection of every row onto the probability simplex (sort and threshold)."""
    V = np.asarray(V, dtype=np.float64)
    N, M = V.shape
    U = -np.sort(-V, axis=1)
    css = np.cumsum(U, axis=1) - 1.0
    ind = np.arange(1, M + 1)
    cond = U - css / ind > 0
    rho = M - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(N), rho] / (rho + 1)
    return np.maximum(V - theta[:, None], 0.0)
