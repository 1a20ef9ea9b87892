"""Closed-form inference tasks and prior families.

Every quantity here is exact: posteriors, diffused scores, backward-kernel
moments, and tall posteriors for the Gaussian and Gaussian-mixture tasks.
These serve both as the ground truth for experiments and as the analytic
score fields the composers consume.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_ndtr

from .schedule import DiffusionSchedule

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class PosteriorMoments:
    """Mean and covariance of a Gaussian posterior."""

    mean: np.ndarray
    cov: np.ndarray


@dataclass(frozen=True)
class MixturePosterior:
    """Two-component Gaussian-mixture posterior with diagonal covariances."""

    weights: np.ndarray     # (2,)
    means: np.ndarray       # (2, m)
    cov_diags: np.ndarray   # (2, m)


@dataclass(frozen=True)
class BackwardMoments:
    """Moments of the (Gaussian) backward kernel at one time step.

    cov is constant in theta_t for Gaussian tasks/priors; mean is per-state.
    """

    mean: np.ndarray  # (..., m)
    cov: np.ndarray   # (m, m)


def _as_batch(theta: np.ndarray) -> tuple[np.ndarray, bool]:
    theta = np.asarray(theta, dtype=float)
    if theta.ndim == 1:
        return theta[None, :], True
    return theta, False


def _gaussian_backward(cov0: np.ndarray, mean0: np.ndarray, theta,
                       alpha: float, upsilon: float) -> BackwardMoments:
    """Backward-kernel moments for a Gaussian with t=0 moments (mean0, cov0)."""
    m = cov0.shape[0]
    A = np.linalg.inv(alpha * cov0 + upsilon * np.eye(m))
    cov_t = (upsilon / alpha) * (np.eye(m) - upsilon * A)
    theta_b, squeeze = _as_batch(theta)
    mean_t = (np.sqrt(alpha) / upsilon) * theta_b @ cov_t.T + upsilon * (mean0 @ A.T)
    return BackwardMoments(mean=mean_t[0] if squeeze else mean_t, cov=cov_t)


class GaussianPrior:
    """Gaussian prior with exact diffused score and backward-kernel moments."""

    def __init__(self, mean: np.ndarray, cov: np.ndarray):
        self.mean = np.asarray(mean, dtype=float)
        self.cov = np.asarray(cov, dtype=float)
        self.m = self.mean.shape[0]
        self.prec = np.linalg.inv(self.cov)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.multivariate_normal(self.mean, self.cov, size=n)

    def log_density_grad(self, theta: np.ndarray) -> np.ndarray:
        """Undiffused score, grad log lambda(theta)."""
        theta_b, squeeze = _as_batch(theta)
        g = -(theta_b - self.mean) @ self.prec.T
        return g[0] if squeeze else g

    def diffused_score(self, theta, t: float, sched: DiffusionSchedule) -> np.ndarray:
        i = sched.index_of(t)
        a, u = sched.alpha[i], sched.upsilon[i]
        A = np.linalg.inv(a * self.cov + u * np.eye(self.m))
        theta_b, squeeze = _as_batch(theta)
        s = -(theta_b - np.sqrt(a) * self.mean) @ A.T
        return s[0] if squeeze else s

    def diffused_score_jacobian(self, theta, t: float, sched: DiffusionSchedule) -> np.ndarray:
        """Jacobian of the diffused score; constant, returned with shape (1, m, m)."""
        i = sched.index_of(t)
        a, u = sched.alpha[i], sched.upsilon[i]
        return -np.linalg.inv(a * self.cov + u * np.eye(self.m))[None, :, :]

    def backward_moments(self, theta, t: float, sched: DiffusionSchedule) -> BackwardMoments:
        i = sched.index_of(t)
        return _gaussian_backward(self.cov, self.mean, theta, sched.alpha[i], sched.upsilon[i])


class UniformPrior:
    """Box-uniform prior with the exact diffused score, evaluated in log space.

    The diffused density factorizes over coordinates into Gaussian CDF
    differences at the scaled bounds. Far outside the scaled support both CDF
    terms underflow; the score is then clamped to magnitude 10/sqrt(upsilon)
    toward the support and the event counted in ``underflow_count``.
    """

    CLAMP_SCALE = 10.0

    def __init__(self, low: np.ndarray, high: np.ndarray):
        self.low = np.atleast_1d(np.asarray(low, dtype=float))
        self.high = np.atleast_1d(np.asarray(high, dtype=float))
        if np.any(self.low >= self.high):
            raise ValueError("uniform bounds must satisfy low < high elementwise")
        self.m = self.low.shape[0]
        self.underflow_count = 0

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.low, self.high, size=(n, self.m))

    def diffused_score(self, theta, t: float, sched: DiffusionSchedule) -> np.ndarray:
        i = sched.index_of(t)
        a, u = sched.alpha[i], sched.upsilon[i]
        ra, ru = np.sqrt(a), np.sqrt(u)
        theta_b, squeeze = _as_batch(theta)
        zb = (ra * self.high - theta_b) / ru
        za = (ra * self.low - theta_b) / ru

        # log(Phi(zb) - Phi(za)), switching to complementary CDFs when both
        # standardized arguments are far in the upper tail.
        upper = 0.5 * (za + zb) > 6.0
        lo, hi = np.where(upper, -zb, za), np.where(upper, -za, zb)
        log_hi, log_lo = log_ndtr(hi), log_ndtr(lo)
        with np.errstate(divide="ignore", invalid="ignore"):
            logf = log_hi + np.log1p(-np.exp(np.minimum(log_lo - log_hi, 0.0)))
        log_phi_b = -0.5 * (zb * zb + LOG_2PI)
        log_phi_a = -0.5 * (za * za + LOG_2PI)
        # score_i = -(phi(zb) - phi(za)) / (sqrt(u) * f)
        with np.errstate(over="ignore", invalid="ignore"):
            score = -(np.exp(log_phi_b - logf) - np.exp(log_phi_a - logf)) / ru

        limit = self.CLAMP_SCALE / ru
        bad = ~np.isfinite(score)
        if np.any(bad):
            self.underflow_count += int(bad.sum())
            center = ra * 0.5 * (self.low + self.high)
            score = np.where(bad, np.sign(center - theta_b) * limit, score)
        score = np.clip(score, -limit, limit)
        return score[0] if squeeze else score

    def diffused_score_jacobian(self, theta, t: float, sched: DiffusionSchedule) -> np.ndarray:
        """Diagonal Jacobian of the diffused score, shape (N, m, m).

        Uses d/dtheta (f'/f) = f''/f - (f'/f)^2 coordinatewise; entries where
        the CDF difference underflows are set to zero (the score is clamped
        flat there).
        """
        i = sched.index_of(t)
        a, u = sched.alpha[i], sched.upsilon[i]
        ra, ru = np.sqrt(a), np.sqrt(u)
        theta_b, _ = _as_batch(theta)
        zb = (ra * self.high - theta_b) / ru
        za = (ra * self.low - theta_b) / ru
        upper = 0.5 * (za + zb) > 6.0
        lo, hi = np.where(upper, -zb, za), np.where(upper, -za, zb)
        log_hi, log_lo = log_ndtr(hi), log_ndtr(lo)
        with np.errstate(divide="ignore", invalid="ignore"):
            logf = log_hi + np.log1p(-np.exp(np.minimum(log_lo - log_hi, 0.0)))
            phi_b = np.exp(-0.5 * (zb * zb + LOG_2PI) - logf)
            phi_a = np.exp(-0.5 * (za * za + LOG_2PI) - logf)
        fp_over_f = -(phi_b - phi_a) / ru
        fpp_over_f = -(zb * phi_b - za * phi_a) / u
        d = fpp_over_f - fp_over_f ** 2
        d = np.where(np.isfinite(d), d, 0.0)
        N = theta_b.shape[0]
        jac = np.zeros((N, self.m, self.m))
        jac[:, np.arange(self.m), np.arange(self.m)] = d
        return jac


class LogNormalPrior:
    """Log-normal prior handled by change of variables to log space.

    All diffusion-time operations act on log(theta); ``to_data`` maps t=0
    samples back to the original parameterization.
    """

    def __init__(self, log_mean: np.ndarray, log_cov: np.ndarray):
        self.gaussian = GaussianPrior(log_mean, log_cov)
        self.m = self.gaussian.m

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return np.exp(self.gaussian.sample(n, rng))

    def diffused_score(self, theta_log, t: float, sched: DiffusionSchedule) -> np.ndarray:
        return self.gaussian.diffused_score(theta_log, t, sched)

    def diffused_score_jacobian(self, theta_log, t: float, sched: DiffusionSchedule) -> np.ndarray:
        return self.gaussian.diffused_score_jacobian(theta_log, t, sched)

    def backward_moments(self, theta_log, t: float, sched: DiffusionSchedule) -> BackwardMoments:
        return self.gaussian.backward_moments(theta_log, t, sched)

    @staticmethod
    def to_data(theta_log: np.ndarray) -> np.ndarray:
        return np.exp(theta_log)


def diffused_prior_score(prior, theta, t: float, sched: DiffusionSchedule) -> np.ndarray:
    """Diffused prior score for any supported prior family."""
    return prior.diffused_score(theta, t, sched)


class GaussianTask:
    """Gaussian location task: x | theta ~ N(theta, Sigma), Gaussian prior.

    Sigma defaults to the equicorrelated matrix (1-rho) I + rho 11^T.
    """

    def __init__(self, m: int, rho: float = 0.8, prior: GaussianPrior | None = None,
                 Sigma: np.ndarray | None = None):
        self.m = m
        self.rho = rho
        if Sigma is None:
            if m > 1 and not (-1.0 / (m - 1) < rho < 1.0):
                raise ValueError(f"rho={rho} makes Sigma indefinite for m={m}")
            Sigma = (1.0 - rho) * np.eye(m) + rho * np.ones((m, m))
        self.Sigma = np.asarray(Sigma, dtype=float)
        self.prior = prior if prior is not None else GaussianPrior(np.zeros(m), np.eye(m))
        self.Sigma_inv = np.linalg.inv(self.Sigma)

    # -- exact posteriors ---------------------------------------------------

    def posterior(self, x: np.ndarray) -> PosteriorMoments:
        cov = np.linalg.inv(self.Sigma_inv + self.prior.prec)
        mean = cov @ (self.Sigma_inv @ np.asarray(x, dtype=float)
                      + self.prior.prec @ self.prior.mean)
        return PosteriorMoments(mean=mean, cov=cov)

    def tall_posterior(self, xs: np.ndarray) -> PosteriorMoments:
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        n = xs.shape[0]
        cov = np.linalg.inv(n * self.Sigma_inv + self.prior.prec)
        mean = cov @ (self.Sigma_inv @ xs.sum(axis=0) + self.prior.prec @ self.prior.mean)
        return PosteriorMoments(mean=mean, cov=cov)

    def sample_posterior(self, x: np.ndarray, n_draws: int, rng: np.random.Generator) -> np.ndarray:
        p = self.posterior(x)
        return rng.multivariate_normal(p.mean, p.cov, size=n_draws)

    def sample_tall_posterior(self, xs: np.ndarray, n_draws: int,
                              rng: np.random.Generator) -> np.ndarray:
        p = self.tall_posterior(xs)
        return rng.multivariate_normal(p.mean, p.cov, size=n_draws)

    # -- diffused quantities ------------------------------------------------

    def _diffused_from_moments(self, post: PosteriorMoments, theta, t, sched):
        i = sched.index_of(t)
        a, u = sched.alpha[i], sched.upsilon[i]
        A = np.linalg.inv(a * post.cov + u * np.eye(self.m))
        theta_b, squeeze = _as_batch(theta)
        s = -(theta_b - np.sqrt(a) * post.mean) @ A.T
        return s[0] if squeeze else s

    def diffused_score(self, theta, x: np.ndarray, t: float,
                       sched: DiffusionSchedule) -> np.ndarray:
        """Score of the diffused single-observation posterior p_t(theta_t | x)."""
        return self._diffused_from_moments(self.posterior(x), theta, t, sched)

    def diffused_score_multi(self, theta: np.ndarray, xs: np.ndarray, t: float,
                             sched: DiffusionSchedule) -> np.ndarray:
        """Per-observation scores, shape (N, n, m), for theta (N, m) and xs (n, m).

        Sigma_post is shared across observations; only the posterior means
        differ, so the (m, m) solve happens once.
        """
        i = sched.index_of(t)
        a, u = sched.alpha[i], sched.upsilon[i]
        cov = np.linalg.inv(self.Sigma_inv + self.prior.prec)
        A = np.linalg.inv(a * cov + u * np.eye(self.m))
        mus = (np.atleast_2d(xs) @ self.Sigma_inv.T + self.prior.prec @ self.prior.mean) @ cov.T
        resid = theta[:, None, :] - np.sqrt(a) * mus[None, :, :]
        return -resid @ A.T

    def diffused_score_jacobian_multi(self, theta: np.ndarray, xs: np.ndarray, t: float,
                                      sched: DiffusionSchedule) -> np.ndarray:
        """Per-observation score Jacobians, shape (1, 1, m, m).

        Constant in both theta and x, so a single matrix broadcast suffices.
        """
        i = sched.index_of(t)
        a, u = sched.alpha[i], sched.upsilon[i]
        cov = np.linalg.inv(self.Sigma_inv + self.prior.prec)
        return -np.linalg.inv(a * cov + u * np.eye(self.m))[None, None, :, :]

    def diffused_tall_score(self, theta, xs: np.ndarray, t: float,
                            sched: DiffusionSchedule) -> np.ndarray:
        """Exact score of the diffused tall posterior (the oracle for composers)."""
        return self._diffused_from_moments(self.tall_posterior(xs), theta, t, sched)

    def backward_moments(self, theta, x: np.ndarray, t: float,
                         sched: DiffusionSchedule) -> BackwardMoments:
        post = self.posterior(x)
        i = sched.index_of(t)
        return _gaussian_backward(post.cov, post.mean, theta, sched.alpha[i], sched.upsilon[i])

    # -- simulation and references ------------------------------------------

    def simulate(self, theta_star: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.multivariate_normal(np.asarray(theta_star, dtype=float), self.Sigma, size=n)

    def tall_log_density_grad(self, theta: np.ndarray, xs: np.ndarray):
        """Unnormalized tall-posterior log density and gradient, batched over theta."""
        theta_b, squeeze = _as_batch(theta)
        xs = np.atleast_2d(xs)
        # lambda^{1-n} prod_j p(theta|x_j) = lambda(theta) prod_j p(x_j|theta)
        d_prior = theta_b - self.prior.mean
        logp = -0.5 * np.einsum("ni,ij,nj->n", d_prior, self.prior.prec, d_prior)
        grad = -d_prior @ self.prior.prec.T
        resid = theta_b[:, None, :] - xs[None, :, :]
        logp = logp - 0.5 * np.einsum("nki,ij,nkj->n", resid, self.Sigma_inv, resid)
        grad = grad - resid.sum(axis=1) @ self.Sigma_inv.T
        if squeeze:
            return float(logp[0]), grad[0]
        return logp, grad


class GmmTask:
    """Two-component Gaussian-mixture likelihood with diagonal covariances.

    x | theta ~ 0.5 N(theta, 2.25 S) + 0.5 N(theta, S/9) where S is diagonal
    with entries increasing linearly from 0.6 to 1.4; prior N(0, I).
    """

    def __init__(self, m: int):
        self.m = m
        base = np.linspace(0.6, 1.4, m)
        self.comp_diags = np.stack([2.25 * base, base / 9.0])   # (2, m)
        self.weights = np.array([0.5, 0.5])
        self.prior = GaussianPrior(np.zeros(m), np.eye(m))

    def posterior(self, x: np.ndarray) -> MixturePosterior:
        x = np.asarray(x, dtype=float)
        cov_p = 1.0 / (1.0 / self.comp_diags + 1.0)             # (2, m)
        means = cov_p * (x[None, :] / self.comp_diags)          # (2, m)
        # marginal component weights ~ N(x; 0, Sigma_i + I)
        marg = self.comp_diags + 1.0
        logw = np.log(self.weights) - 0.5 * (np.log(marg).sum(axis=1)
                                             + (x[None, :] ** 2 / marg).sum(axis=1))
        w = np.exp(logw - logw.max())
        return MixturePosterior(weights=w / w.sum(), means=means, cov_diags=cov_p)

    def diffused_score(self, theta, x: np.ndarray, t: float,
                       sched: DiffusionSchedule) -> np.ndarray:
        theta_b, squeeze = _as_batch(theta)
        s = self.diffused_score_multi(theta_b, np.asarray(x)[None, :], t, sched)[:, 0, :]
        return s[0] if squeeze else s

    def _diffused_mixture(self, theta: np.ndarray, xs: np.ndarray, t: float,
                          sched: DiffusionSchedule):
        """Responsibilities, component scores, and component variances at time t.

        Responsibilities are evaluated under the t-diffused component
        densities, not the t=0 posterior weights alone.
        """
        i = sched.index_of(t)
        a, u = sched.alpha[i], sched.upsilon[i]
        xs = np.atleast_2d(xs)
        cov_p = 1.0 / (1.0 / self.comp_diags + 1.0)             # (2, m)
        means = cov_p[None, :, :] * (xs[:, None, :] / self.comp_diags[None, :, :])  # (n,2,m)
        marg = self.comp_diags + 1.0
        logw0 = np.log(self.weights)[None, :] - 0.5 * (
            np.log(marg).sum(axis=1)[None, :]
            + np.einsum("nm,km->nk", xs ** 2, 1.0 / marg))
        var_t = a * cov_p + u                                   # (2, m)
        resid = theta[:, None, None, :] - np.sqrt(a) * means[None, :, :, :]   # (N,n,2,m)
        log_comp = -0.5 * (np.log(var_t).sum(axis=1)[None, None, :]
                           + np.einsum("Nnkm,km->Nnk", resid ** 2, 1.0 / var_t))
        logr = logw0[None, :, :] + log_comp                     # (N, n, 2)
        logr = logr - logr.max(axis=2, keepdims=True)
        r = np.exp(logr)
        r = r / r.sum(axis=2, keepdims=True)
        comp_scores = -resid / var_t[None, None, :, :]          # (N, n, 2, m)
        return r, comp_scores, var_t

    def diffused_score_multi(self, theta: np.ndarray, xs: np.ndarray, t: float,
                             sched: DiffusionSchedule) -> np.ndarray:
        """Scores of p_t(theta_t | x_j) for all observations, shape (N, n, m)."""
        r, comp_scores, _ = self._diffused_mixture(theta, xs, t, sched)
        return np.einsum("Nnk,Nnkm->Nnm", r, comp_scores)

    def diffused_score_jacobian_multi(self, theta: np.ndarray, xs: np.ndarray, t: float,
                                      sched: DiffusionSchedule) -> np.ndarray:
        """Per-observation score Jacobians, shape (N, n, m, m).

        For a mixture, the Hessian of the log density is the responsibility-
        weighted component Hessian plus the covariance of component scores.
        """
        r, comp_scores, var_t = self._diffused_mixture(theta, xs, t, sched)
        s = np.einsum("Nnk,Nnkm->Nnm", r, comp_scores)
        diag = np.einsum("Nnk,km->Nnm", r, 1.0 / var_t)         # (N, n, m)
        jac = (np.einsum("Nnk,Nnkm,Nnkl->Nnml", r, comp_scores, comp_scores)
               - np.einsum("Nnm,Nnl->Nnml", s, s))
        idx = np.arange(self.m)
        jac[:, :, idx, idx] -= diag
        return jac

    def simulate(self, theta_star: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
        theta_star = np.asarray(theta_star, dtype=float)
        comp = rng.integers(0, 2, size=n)
        z = rng.standard_normal((n, self.m))
        return theta_star + z * np.sqrt(self.comp_diags[comp])

    def sample_tall_posterior(self, xs: np.ndarray, n_draws: int,
                              rng: np.random.Generator) -> np.ndarray:
        """Exact draws from the tall posterior by component enumeration.

        Expanding the product of n two-component likelihoods gives a mixture
        of 2^n Gaussians with diagonal covariances; weights follow from the
        per-assignment evidences. Exact, so preferred over MCMC references
        whenever 2^n is tractable.
        """
        xs = np.atleast_2d(xs)
        n, m = xs.shape
        if n > 14:
            raise ValueError(f"component enumeration infeasible for n={n} (> 14)")
        choices = ((np.arange(2 ** n)[:, None] >> np.arange(n)[None, :]) & 1)  # (K, n)
        inv_sel = (1.0 / self.comp_diags)[choices]              # (K, n, m)
        prec = 1.0 + inv_sel.sum(axis=1)                        # (K, m), unit prior
        lin = (xs[None, :, :] * inv_sel).sum(axis=1)            # (K, m)
        logw = (0.5 * np.log(inv_sel).sum(axis=(1, 2))
                - 0.5 * (xs[None, :, :] ** 2 * inv_sel).sum(axis=(1, 2))
                - 0.5 * np.log(prec).sum(axis=1)
                + 0.5 * (lin ** 2 / prec).sum(axis=1))
        w = np.exp(logw - logw.max())
        k = rng.choice(len(w), size=n_draws, p=w / w.sum())
        return lin[k] / prec[k] + rng.standard_normal((n_draws, m)) / np.sqrt(prec[k])

    def single_log_density_grad(self, theta: np.ndarray, x: np.ndarray):
        """log p(theta | x) (unnormalized) and gradient, batched over theta."""
        post = self.posterior(x)
        theta_b, squeeze = _as_batch(theta)
        resid = theta_b[:, None, :] - post.means[None, :, :]    # (N, 2, m)
        logc = (np.log(post.weights)[None, :]
                - 0.5 * (np.log(post.cov_diags).sum(axis=1)[None, :]
                         + (resid ** 2 / post.cov_diags[None, :, :]).sum(axis=2)))
        mx = logc.max(axis=1, keepdims=True)
        w = np.exp(logc - mx)
        logp = (mx[:, 0] + np.log(w.sum(axis=1)))
        r = w / w.sum(axis=1, keepdims=True)
        grad = -np.einsum("Nk,Nkm->Nm", r, resid / post.cov_diags[None, :, :])
        if squeeze:
            return float(logp[0]), grad[0]
        return logp, grad

    def tall_log_density_grad(self, theta: np.ndarray, xs: np.ndarray):
        """Tall-posterior log density lambda^(1-n) prod_j p(theta|x_j) and gradient."""
        theta_b, squeeze = _as_batch(theta)
        xs = np.atleast_2d(xs)
        n = xs.shape[0]
        logp = (1.0 - n) * (-0.5 * (theta_b ** 2).sum(axis=1))
        grad = (1.0 - n) * (-theta_b)
        # prior appears with weight (1-n) on top of the n posterior factors
        for x in xs:
            lp, g = self.single_log_density_grad(theta_b, x)
            logp = logp + lp
            grad = grad + g
        if squeeze:
            return float(logp[0]), grad[0]
        return logp, grad
