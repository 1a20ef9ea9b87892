"""Composition of per-observation scores into a tall-posterior score.

Given n single-observation posterior score fields and a prior score field, the
composers here produce the score of the product posterior
lambda(theta)^(1-n) prod_j p(theta | x_j) at diffusion time t. The exact rule
weights each score by a backward-kernel precision; the two practical variants
differ only in where those precisions come from: constant covariance estimates
(GAUSS) or score Jacobians (JAC). A first-order rule (FNPSE) skips the
precision weighting entirely. The Gaussian log correction used to justify the
weighting is also implemented for diagnostics.
"""

from __future__ import annotations

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))


def zeta(mu: np.ndarray, prec: np.ndarray) -> np.ndarray:
    """Gaussian normalizer exponent -0.5 (m log 2pi - log|prec| + mu' prec mu).

    Args:
        mu: mean vectors, shape (..., m).
        prec: precision matrix, shape (m, m), shared across the batch.

    Returns:
        Array of shape mu.shape[:-1].
    """
    mu = np.asarray(mu, dtype=float)
    prec = np.asarray(prec, dtype=float)
    m = prec.shape[0]
    sign, logdet = np.linalg.slogdet(prec)
    if sign <= 0:
        raise np.linalg.LinAlgError("precision matrix must be positive definite")
    quad = np.einsum("...i,ij,...j->...", mu, prec, mu)
    return -0.5 * (m * LOG_2PI - logdet + quad)


def log_correction(means: np.ndarray, precisions: np.ndarray,
                   prior_mean: np.ndarray, prior_precision: np.ndarray) -> np.ndarray:
    """Log of the Gaussian product-form correction factor.

    For backward kernels N(mu_j, P_j^{-1}) per observation and N(mu_l, P_l^{-1})
    for the prior, the correction to the factorized transition is

        sum_j zeta(mu_j, P_j) + (1-n) zeta(mu_l, P_l) - zeta(Lam^{-1} eta, Lam)

    with Lam = sum_j P_j + (1-n) P_l and eta = sum_j P_j mu_j + (1-n) P_l mu_l.

    Args:
        means: per-observation kernel means, shape (n, m) or (N, n, m).
        precisions: per-observation precisions, shape (n, m, m).
        prior_mean: prior kernel mean, shape (m,) or (N, m).
        prior_precision: prior kernel precision, shape (m, m).

    Returns:
        Scalar (or shape (N,) for batched means).
    """
    means = np.asarray(means, dtype=float)
    precisions = np.asarray(precisions, dtype=float)
    prior_mean = np.asarray(prior_mean, dtype=float)
    n = precisions.shape[0]

    total = np.zeros(means.shape[:-2]) if means.ndim == 3 else 0.0
    for j in range(n):
        total = total + zeta(means[..., j, :], precisions[j])
    total = total + (1 - n) * zeta(prior_mean, prior_precision)

    lam = precisions.sum(axis=0) + (1 - n) * prior_precision
    eta = (np.einsum("kij,...kj->...i", precisions, means)
           + (1 - n) * prior_mean @ prior_precision.T)
    mu_all = np.linalg.solve(lam, eta[..., None])[..., 0]
    return total - zeta(mu_all, lam)


def lambda_matrix(precisions: np.ndarray, prior_precision: np.ndarray, n: int) -> np.ndarray:
    """Aggregate precision Lam = sum_j P_j + (1-n) P_l.

    Accepts constant precisions (n, m, m) or batched (N, n, m, m); the prior
    precision may be (m, m) or (N, m, m).
    """
    axis = 0 if precisions.ndim == 3 else 1
    return precisions.sum(axis=axis) + (1 - n) * prior_precision


def check_lambda_spd(precisions: np.ndarray, prior_precision: np.ndarray, n: int):
    """Validity check for the precision-weighted composition.

    The combination is well posed only when the aggregate precision is
    symmetric positive definite, i.e. the prior kernel is wider than the
    harmonic mean of the observation kernels.

    Returns:
        (is_spd, min_eigenvalue) of the symmetrized aggregate precision;
        arrays when the precisions are batched.
    """
    lam = lambda_matrix(np.asarray(precisions, dtype=float),
                        np.asarray(prior_precision, dtype=float), n)
    lam = 0.5 * (lam + np.swapaxes(lam, -1, -2))
    w_min = np.linalg.eigvalsh(lam)[..., 0]
    if np.ndim(w_min) == 0:
        return bool(w_min > 0.0), float(w_min)
    return w_min > 0.0, w_min


def compose_det_gef(mu_obs: np.ndarray, mu_prior: np.ndarray, step_alpha: float):
    """One reverse-step distribution for the deterministic-averaging baseline.

    Args:
        mu_obs: per-observation DDPM reverse means, shape (N, n, m).
        mu_prior: prior reverse mean, shape (N, m).
        step_alpha: per-step scale ratio a_s of the schedule.

    Returns:
        (mean (N, m), variance scalar): the averaged mean with prior weight
        (1-n) and the shared scalar variance (1-a_s)/(n - a_s (n-1)).
    """
    n = mu_obs.shape[1]
    b = 1.0 - step_alpha
    var = b / (n - step_alpha * (n - 1))
    mean = var * (mu_obs.sum(axis=1) / b + (1 - n) * (step_alpha / b) * mu_prior)
    return mean, var


def _chol_spd(mat: np.ndarray) -> bool:
    try:
        np.linalg.cholesky(mat)
        return True
    except np.linalg.LinAlgError:
        return False


class FnpseComposer:
    """First-order composition: sum of scores with a geometric prior weight.

    s(theta, t) = (1-n)(1-t) grad log lambda(theta) + sum_j s_j(theta, t)

    using the undiffused prior score. Cheap, biased at intermediate t, and the
    standard inner-loop drift for annealed Langevin sampling.
    """

    def __init__(self, fields):
        self.fields = fields
        self.n = fields.n

    def __call__(self, theta: np.ndarray, t: float) -> np.ndarray:
        s = self.fields.eval_multi(theta, t).sum(axis=1)
        prior_grad = self.fields.task.prior.log_density_grad(theta)
        return (1 - self.n) * (1.0 - t) * prior_grad + s


class _PrecisionComposer:
    """Shared machinery for precision-weighted composition with fallback.

    Subclasses supply per-step precisions. When the aggregate precision fails
    to be positive definite at a step, the affected samples fall back to the
    first-order rule and the step time is recorded in ``fallback_steps``.
    """

    def __init__(self, fields):
        self.fields = fields
        self.n = fields.n
        self.m = fields.m
        self.fallback_steps: list[float] = []

    def _precisions(self, theta: np.ndarray, t: float):
        raise NotImplementedError

    def __call__(self, theta: np.ndarray, t: float) -> np.ndarray:
        scores = self.fields.eval_multi(theta, t)
        prior_s = self.fields.prior_score(theta, t)
        P, Pl = self._precisions(theta, t)
        n = self.n

        if P.ndim == 3:
            lam = P.sum(axis=0) + (1 - n) * Pl
            if not _chol_spd(lam):
                self.fallback_steps.append(t)
                return self._fallback(scores, theta, t)
            numer = (np.einsum("kij,Nkj->Ni", P, scores)
                     + (1 - n) * prior_s @ Pl.T)
            return np.linalg.solve(lam, numer[..., None])[..., 0]

        lam = P.sum(axis=1) + (1 - n) * Pl
        lam = 0.5 * (lam + np.swapaxes(lam, -1, -2))
        numer = np.einsum("Nkij,Nkj->Ni", P, scores)
        numer = numer + (1 - n) * np.einsum("...ij,Nj->Ni", Pl, prior_s)
        if _chol_spd(lam):
            return np.linalg.solve(lam, numer[..., None])[..., 0]
        # isolate the offending samples instead of discarding the whole batch
        bad = np.linalg.eigvalsh(lam)[:, 0] <= 0.0
        self.fallback_steps.append(t)
        out = np.empty_like(prior_s)
        good = ~bad
        if good.any():
            out[good] = np.linalg.solve(lam[good], numer[good][..., None])[..., 0]
        out[bad] = self._fallback(scores[bad], theta[bad], t)
        return out

    def _fallback(self, scores: np.ndarray, theta: np.ndarray, t: float) -> np.ndarray:
        prior_grad = self.fields.task.prior.log_density_grad(theta)
        return (1 - self.n) * (1.0 - t) * prior_grad + scores.sum(axis=1)


class GaussComposer(_PrecisionComposer):
    """Precision weighting from constant per-observation covariance estimates.

    Each observation contributes the precision Shat_j^{-1} + (alpha_t/upsilon_t) I
    where Shat_j estimates the t=0 posterior covariance for observation j; the
    prior contributes the analogous term. With exact covariances this rule is
    exact for Gaussian posteriors at every t.
    """

    def __init__(self, fields, post_covs: np.ndarray, prior_cov: np.ndarray):
        super().__init__(fields)
        post_covs = np.asarray(post_covs, dtype=float)
        if post_covs.shape != (self.n, self.m, self.m):
            raise ValueError(f"post_covs must have shape {(self.n, self.m, self.m)}")
        self._post_precs = np.linalg.inv(post_covs)
        self._prior_prec = np.linalg.inv(np.asarray(prior_cov, dtype=float))

    def _precisions(self, theta: np.ndarray, t: float):
        i = self.fields.sched.index_of(t)
        ratio = self.fields.sched.alpha[i] / self.fields.sched.upsilon[i]
        eye = ratio * np.eye(self.m)
        return self._post_precs + eye, self._prior_prec + eye


class JacComposer(_PrecisionComposer):
    """Precision weighting from score Jacobians.

    Each observation contributes (alpha_t/upsilon_t)(I + upsilon_t J_j)^{-1}
    with J_j the Jacobian of its score at the current state; no gradients flow
    through this matrix. Non-SPD inner matrices are repaired by flooring their
    eigenvalues at 1e-6 and the step time recorded in ``floored_steps``.
    """

    EIG_FLOOR = 1e-6

    def __init__(self, fields):
        super().__init__(fields)
        self.floored_steps: list[float] = []

    def _inner_inverse(self, M: np.ndarray, t: float) -> np.ndarray:
        M = 0.5 * (M + np.swapaxes(M, -1, -2))
        try:
            np.linalg.cholesky(M)
        except np.linalg.LinAlgError:
            self.floored_steps.append(t)
            w, V = np.linalg.eigh(M)
            w = np.maximum(w, self.EIG_FLOOR)
            return np.einsum("...ik,...k,...jk->...ij", V, 1.0 / w, V)
        return np.linalg.inv(M)

    def _precisions(self, theta: np.ndarray, t: float):
        i = self.fields.sched.index_of(t)
        a, u = self.fields.sched.alpha[i], self.fields.sched.upsilon[i]
        eye = np.eye(self.m)
        J = self.fields.jacobian_multi(theta, t)
        Jl = self.fields.prior_jacobian(theta, t)
        P = (a / u) * self._inner_inverse(eye + u * J, t)
        Pl = (a / u) * self._inner_inverse(eye + u * Jl, t)
        if P.ndim == 4 and P.shape[0] == 1 and P.shape[1] in (1, self.n):
            P = np.broadcast_to(P[0], (self.n, self.m, self.m)) if P.shape[1] == 1 else P[0]
        if Pl.ndim == 3 and Pl.shape[0] == 1:
            Pl = Pl[0]
        if P.ndim == 4 and theta.shape[0] != P.shape[0]:
            P = np.broadcast_to(P, (theta.shape[0],) + P.shape[1:])
        return P, Pl
