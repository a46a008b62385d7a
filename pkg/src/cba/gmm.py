"""Gaussian mixture fitting: k-means++ seeded EM with full covariances.

Written against three hard requirements that rule out off-the-shelf fitters:
a per-iteration log-likelihood trace (monotonicity is a tested invariant), an
eigenvalue floor on covariances (the constrained M-step optimum, which keeps
EM monotone even when the floor binds), and bit-exact refit determinism from
an injected Generator.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))

DEFAULT_COV_FLOOR = 1e-4
DEFAULT_EM_TOL = 1e-6
DEFAULT_EM_MAX_ITER = 200

# A mixture weight this small means a component lost its support; the fit is
# reported degenerate and model selection skips it.
_WEIGHT_EPS = 1e-10


@dataclass(frozen=True)
class EmResult:
    weights: np.ndarray  # (k,)
    means: np.ndarray  # (k, d)
    covariances: np.ndarray  # (k, d, d)
    log_likelihood: float
    ll_trace: tuple[float, ...]
    n_iter: int
    converged: bool
    degenerate: bool = False

    @property
    def k(self) -> int:
        return int(self.weights.shape[0])


def logsumexp(a: np.ndarray, axis: int | None = None) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    if axis is None:
        return out.reshape(())
    return np.squeeze(out, axis=axis)


def floor_spd(cov: np.ndarray, floor: float) -> np.ndarray:
    """Clamp the eigenvalues of a symmetric matrix at `floor`."""
    sym = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(sym)
    vals = np.maximum(vals, floor)
    return (vecs * vals) @ vecs.T


def component_log_densities(
    X: np.ndarray, means: np.ndarray, covariances: np.ndarray
) -> np.ndarray:
    """Log N(x; mu_j, Sigma_j) for every point/component pair, shape (n, k).

    Covariances must already be SPD (the floor guarantees it).
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n, d = X.shape
    chol = np.linalg.cholesky(covariances)  # (k, d, d)
    chol_inv = np.linalg.inv(chol)
    diff = X[None, :, :] - means[:, None, :]  # (k, n, d)
    y = np.einsum("kij,knj->kni", chol_inv, diff)
    maha = np.einsum("kni,kni->kn", y, y)  # (k, n)
    log_det = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)  # (k,)
    return (-0.5 * (d * LOG_2PI + log_det[:, None] + maha)).T


def mixture_log_density(
    X: np.ndarray, weights: np.ndarray, means: np.ndarray, covariances: np.ndarray
) -> np.ndarray:
    """Log of sum_j w_j N(x; mu_j, Sigma_j), shape (n,)."""
    log_p = component_log_densities(X, means, covariances)
    return logsumexp(log_p + np.log(weights)[None, :], axis=1)


def kmeans_pp_centers(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding; centers are data points, selection order is fixed by rng."""
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centers[0] = X[first]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # All remaining points coincide with a chosen center; callers are
            # expected to cap k at the distinct-point count, but stay safe.
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[j] = X[idx]
        d2 = np.minimum(d2, np.sum((X - centers[j]) ** 2, axis=1))
    return centers


def _m_step(
    X: np.ndarray, resp: np.ndarray, floor: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray] | None:
    n, d = X.shape
    nk = resp.sum(axis=0)  # (k,)
    if np.any(nk < _WEIGHT_EPS * n):
        return None
    weights = nk / n
    means = (resp.T @ X) / nk[:, None]
    k = resp.shape[1]
    covs = np.empty((k, d, d), dtype=np.float64)
    for j in range(k):
        diff = X - means[j]
        cov = (resp[:, j][:, None] * diff).T @ diff / nk[j]
        covs[j] = floor_spd(cov, floor)
    return weights, means, covs


def em_fit(
    X: np.ndarray,
    k: int,
    rng: np.random.Generator,
    *,
    cov_floor: float = DEFAULT_COV_FLOOR,
    tol: float = DEFAULT_EM_TOL,
    max_iter: int = DEFAULT_EM_MAX_ITER,
) -> EmResult:
    """Fit a k-component full-covariance GMM to X.

    The returned log_likelihood and the last trace entry always describe the
    returned parameters. Convergence: relative log-likelihood change < tol.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must be in [1, n={n}]")

    centers = kmeans_pp_centers(X, k, rng)
    assign = np.argmin(
        np.sum((X[:, None, :] - centers[None, :, :]) ** 2, axis=2), axis=1
    )
    resp = np.zeros((n, k), dtype=np.float64)
    resp[np.arange(n), assign] = 1.0
    params = _m_step(X, resp, cov_floor)
    if params is None:
        # An initial center captured no points (possible with duplicate-heavy
        # data); give every component a uniform share instead.
        resp = np.full((n, k), 1.0 / k)
        params = _m_step(X, resp, cov_floor)
        assert params is not None
    weights, means, covs = params

    trace: list[float] = []
    prev_ll = -np.inf
    converged = False
    for _ in range(max_iter):
        log_p = component_log_densities(X, means, covs) + np.log(weights)[None, :]
        log_norm = logsumexp(log_p, axis=1)
        ll = float(log_norm.sum())
        trace.append(ll)
        if ll - prev_ll < tol * max(1.0, abs(prev_ll)) and len(trace) > 1:
            converged = True
            break
        prev_ll = ll
        resp = np.exp(log_p - log_norm[:, None])
        params = _m_step(X, resp, cov_floor)
        if params is None:
            return EmResult(
                weights, means, covs, ll, tuple(trace), len(trace), False, degenerate=True
            )
        weights, means, covs = params
    else:
        # max_iter exhausted after an M-step: record the likelihood of the
        # parameters actually returned.
        log_p = component_log_densities(X, means, covs) + np.log(weights)[None, :]
        ll = float(logsumexp(log_p, axis=1).sum())
        trace.append(ll)

    return EmResult(weights, means, covs, trace[-1], tuple(trace), len(trace), converged)


def n_free_parameters(k: int, d: int) -> int:
    return (k - 1) + k * d + k * (d * (d + 1)) // 2


def bic(result: EmResult, n: int, d: int) -> float:
    return -2.0 * result.log_likelihood + n_free_parameters(result.k, d) * float(np.log(n))


def fit_best_k(
    X: np.ndarray,
    k_max: int,
    seed_parts: tuple[int, ...],
    *,
    cov_floor: float = DEFAULT_COV_FLOOR,
    tol: float = DEFAULT_EM_TOL,
    max_iter: int = DEFAULT_EM_MAX_ITER,
) -> EmResult:
    """BIC sweep over k = 1..k_max (capped at the distinct-point count).

    Each k gets its own generator derived from (seed_parts, k) so the sweep
    order can never perturb a fit. Ties in BIC go to the smaller k.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    n_distinct = np.unique(X, axis=0).shape[0]
    k_cap = max(1, min(k_max, n, n_distinct))
    best: EmResult | None = None
    best_bic = np.inf
    for k in range(1, k_cap + 1):
        rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(tuple(seed_parts) + (k,)))
        )
        res = em_fit(X, k, rng, cov_floor=cov_floor, tol=tol, max_iter=max_iter)
        if res.degenerate:
            continue
        b = bic(res, n, d)
        if b < best_bic:
            best, best_bic = res, b
    if best is None:
        # Every k degenerated, which cannot happen for k=1; defensive only.
        raise RuntimeError("model selection found no non-degenerate fit")
    return best
