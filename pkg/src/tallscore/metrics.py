"""Distribution distances used to score sampler output.

Sliced Wasserstein with exact 1D quantile coupling, an unbiased RBF MMD with
median-heuristic bandwidth, and a per-dimension MMD against a point mass.
"""

from __future__ import annotations

import numpy as np


def make_projections(m: int, n_proj: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random unit directions, shape (m, n_proj).

    Comparisons across methods should reuse one projection set to remove
    projection Monte-Carlo noise from the ranking.
    """
    u = rng.standard_normal((m, n_proj))
    return u / np.linalg.norm(u, axis=0, keepdims=True)


def _w2_sq_1d(pa: np.ndarray, pb: np.ndarray) -> np.ndarray:
    """Squared 1D Wasserstein-2 per column between empirical distributions.

    Args:
        pa: projected samples, shape (N, k), one column per projection.
        pb: projected samples, shape (M, k).

    Returns:
        Array of k squared distances, via the exact piecewise-constant
        quantile coupling (handles N != M).
    """
    N, M = pa.shape[0], pb.shape[0]
    sa = np.sort(pa, axis=0)
    sb = np.sort(pb, axis=0)
    if N == M:
        return np.mean((sa - sb) ** 2, axis=0)
    edges = np.union1d(np.arange(1, N) / N, np.arange(1, M) / M)
    bounds = np.concatenate(([0.0], edges, [1.0]))
    widths = np.diff(bounds)
    mids = 0.5 * (bounds[:-1] + bounds[1:])
    ia = np.minimum((mids * N).astype(int), N - 1)
    ib = np.minimum((mids * M).astype(int), M - 1)
    return np.einsum("k,kp->p", widths, (sa[ia] - sb[ib]) ** 2)


def sliced_wasserstein(A: np.ndarray, B: np.ndarray, n_proj: int = 1000,
                       rng: np.random.Generator | None = None,
                       projections: np.ndarray | None = None) -> float:
    """Sliced Wasserstein-2 distance between two sample sets.

    Projects both sets onto random unit directions, computes the exact 1D W2
    on each, and returns sqrt(mean of squared distances).

    Args:
        A: samples, shape (N, m).
        B: samples, shape (M, m).
        n_proj: number of projections when drawing them here.
        rng: generator for the projections (fresh default_rng() if omitted).
        projections: optional fixed (m, k) projection set overriding n_proj.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if projections is None:
        if rng is None:
            rng = np.random.default_rng()
        projections = make_projections(A.shape[1], n_proj, rng)
    return float(np.sqrt(np.mean(_w2_sq_1d(A @ projections, B @ projections))))


def _median_bandwidth(X: np.ndarray, rng_cap: int = 2000) -> float:
    if X.shape[0] > rng_cap:
        X = X[np.linspace(0, X.shape[0] - 1, rng_cap).astype(int)]
    d2 = np.sum((X[:, None, :] - X[None, :, :]) ** 2, axis=2)
    med = np.median(np.sqrt(d2[np.triu_indices_from(d2, k=1)]))
    return float(med) if med > 0 else 1.0


def mmd_rbf(A: np.ndarray, B: np.ndarray, bandwidth: float | None = None) -> float:
    """Unbiased RBF-kernel MMD between two sample sets.

    The kernel is exp(-||x-y||^2 / (2 h^2)) with h the median pairwise
    distance of the pooled samples when not given. Returns
    sqrt(max(MMD^2, 0)).
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    # quadratic-cost estimator; deterministic subsample keeps it tractable
    if A.shape[0] > 4000:
        A = A[np.linspace(0, A.shape[0] - 1, 4000).astype(int)]
    if B.shape[0] > 4000:
        B = B[np.linspace(0, B.shape[0] - 1, 4000).astype(int)]
    if bandwidth is None:
        bandwidth = _median_bandwidth(np.concatenate([A, B], axis=0))
    g = 1.0 / (2.0 * bandwidth ** 2)

    def mean_offdiag(X, Y):
        d2 = (np.sum(X ** 2, 1)[:, None] + np.sum(Y ** 2, 1)[None, :]
              - 2.0 * X @ Y.T)
        K = np.exp(-g * np.maximum(d2, 0.0))
        if X is Y:
            n = X.shape[0]
            return (K.sum() - np.trace(K)) / (n * (n - 1))
        return K.mean()

    mmd2 = mean_offdiag(A, A) + mean_offdiag(B, B) - 2.0 * mean_offdiag(A, B)
    return float(np.sqrt(max(mmd2, 0.0)))


def dirac_concentration(A: np.ndarray, theta_star: np.ndarray,
                        bandwidth: float | None = None) -> np.ndarray:
    """Per-dimension RBF MMD between each marginal of A and a point mass.

    Measures how tightly each marginal concentrates on the reference point;
    zero iff the marginal is the point mass itself.

    Args:
        A: samples, shape (N, m).
        theta_star: reference point, shape (m,).
        bandwidth: shared kernel width; per-dimension median heuristic on
            |x - theta_star| when unset.

    Returns:
        Array of m nonnegative values.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    theta_star = np.asarray(theta_star, dtype=float)
    if A.shape[0] > 4000:
        A = A[np.linspace(0, A.shape[0] - 1, 4000).astype(int)]
    N, m = A.shape
    out = np.empty(m)
    for d in range(m):
        x = A[:, d]
        h = bandwidth
        if h is None:
            med = np.median(np.abs(x - theta_star[d]))
            h = float(med) if med > 0 else 1.0
        g = 1.0 / (2.0 * h ** 2)
        d2 = (x[:, None] - x[None, :]) ** 2
        K = np.exp(-g * d2)
        term_aa = (K.sum() - N) / (N * (N - 1))
        term_ab = np.mean(np.exp(-g * (x - theta_star[d]) ** 2))
        out[d] = np.sqrt(max(term_aa - 2.0 * term_ab + 1.0, 0.0))
    return out
