import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import multivariate_normal

from tallscore.compose import (FnpseComposer, GaussComposer, JacComposer,
                               check_lambda_spd, compose_det_gef, lambda_matrix,
                               log_correction, zeta)
from tallscore.fields import AnalyticFieldSet
from tallscore.schedule import make_schedule
from tallscore.tasks import GaussianTask, GmmTask

SCHED = make_schedule(100)


def make_fields(task, n, seed):
    rng = np.random.default_rng(seed)
    theta_star = task.prior.sample(1, rng)[0]
    xs = task.simulate(theta_star, n, rng)
    return AnalyticFieldSet(task, xs, SCHED)


# -- normalizer and correction ----------------------------------------------


def test_zeta_is_log_density_at_zero():
    rng = np.random.default_rng(0)
    for m in (1, 2, 4):
        mu = rng.standard_normal(m)
        A = rng.standard_normal((m, m))
        prec = A @ A.T + m * np.eye(m)
        want = multivariate_normal.logpdf(np.zeros(m), mu, np.linalg.inv(prec))
        assert zeta(mu, prec) == pytest.approx(want, rel=1e-10)


def test_zeta_batched():
    rng = np.random.default_rng(1)
    mus = rng.standard_normal((5, 3))
    prec = 2.0 * np.eye(3)
    out = zeta(mus, prec)
    assert out.shape == (5,)
    for i in range(5):
        assert out[i] == pytest.approx(zeta(mus[i], prec))


def test_zeta_rejects_indefinite_precision():
    with pytest.raises(np.linalg.LinAlgError):
        zeta(np.zeros(3), -np.eye(3))


def test_log_correction_matches_quadrature_1d():
    """log_correction equals the log integral of the weighted Gaussian product."""
    rng = np.random.default_rng(2)
    for n in (2, 3):
        mus = rng.normal(0.0, 0.5, size=(n, 1))
        precs = rng.uniform(0.8, 2.0, size=(n, 1, 1))
        mu_l = rng.normal(0.0, 0.5, size=1)
        prec_l = np.array([[0.5]])

        def integrand(v):
            val = 1.0
            for j in range(n):
                val *= multivariate_normal.pdf(v, mus[j], 1.0 / precs[j, 0, 0])
            val *= multivariate_normal.pdf(v, mu_l, 1.0 / prec_l[0, 0]) ** (1 - n)
            return val

        got = log_correction(mus, precs, mu_l, prec_l)
        want, _ = quad(integrand, -30, 30, limit=200)
        assert got == pytest.approx(np.log(want), rel=1e-7)


def test_log_correction_single_observation_is_zero():
    # n=1 leaves nothing to correct: the product is the kernel itself
    mu = np.array([[0.3, -0.2]])
    prec = np.eye(2)[None]
    out = log_correction(mu, prec, np.zeros(2), np.eye(2))
    assert out == pytest.approx(0.0, abs=1e-12)


def test_log_correction_batched_means():
    rng = np.random.default_rng(3)
    means = rng.standard_normal((6, 2, 3))
    precs = np.stack([np.eye(3), 2.0 * np.eye(3)])
    prior_mu = np.zeros(3)
    out = log_correction(means, precs, prior_mu, 0.5 * np.eye(3))
    assert out.shape == (6,)
    for i in range(6):
        assert out[i] == pytest.approx(
            log_correction(means[i], precs, prior_mu, 0.5 * np.eye(3)))


# -- aggregate precision -----------------------------------------------------


def test_lambda_matrix_formula():
    precs = np.stack([np.eye(2), 3.0 * np.eye(2)])
    lam = lambda_matrix(precs, 0.5 * np.eye(2), n=2)
    assert np.allclose(lam, (1 + 3 - 0.5) * np.eye(2))


def test_check_lambda_spd_classifies():
    ok, w = check_lambda_spd(np.stack([np.eye(2)] * 3), 0.1 * np.eye(2), n=3)
    assert ok and w > 0
    # dominant prior precision with n > 1 flips the sign
    bad, w_bad = check_lambda_spd(np.stack([0.01 * np.eye(2)] * 3), 10.0 * np.eye(2), n=3)
    assert not bad and w_bad < 0


def test_check_lambda_spd_batched():
    precs = np.stack([np.stack([np.eye(2)] * 2),
                      np.stack([0.01 * np.eye(2)] * 2)])   # (N=2, n=2, m, m)
    ok, w = check_lambda_spd(precs, np.eye(2), n=2)
    assert ok.tolist() == [True, False]
    assert w[0] > 0 > w[1]


# -- deterministic-averaging step -------------------------------------------


def test_compose_det_gef_n1_is_plain_ddpm_step():
    mu = np.random.default_rng(4).standard_normal((5, 1, 3))
    a_s = 0.98
    mean, var = compose_det_gef(mu, np.zeros((5, 3)), a_s)
    assert np.allclose(mean, mu[:, 0, :])
    assert var == pytest.approx(1.0 - a_s)


def test_compose_det_gef_variance_shrinks_with_n():
    mus = np.zeros((1, 4, 2))
    _, var4 = compose_det_gef(mus, np.zeros((1, 2)), 0.95)
    _, var1 = compose_det_gef(mus[:, :1], np.zeros((1, 2)), 0.95)
    assert var4 == pytest.approx(0.05 / (4 - 0.95 * 3))
    assert var4 < var1


# -- composers ---------------------------------------------------------------


def test_gauss_composer_exact_covs_recover_tall_score():
    task = GaussianTask(3, rho=0.8)
    f = make_fields(task, n=6, seed=5)
    covs = np.stack([task.posterior(x).cov for x in f.xs])
    composer = GaussComposer(f, covs, task.prior.cov)
    theta = np.random.default_rng(6).standard_normal((8, 3))
    for t in (SCHED.grid[4], SCHED.grid[49], SCHED.grid[99]):
        got = composer(theta, t)
        want = task.diffused_tall_score(theta, f.xs, t, SCHED)
        assert np.allclose(got, want, rtol=1e-8, atol=1e-10)
    assert composer.fallback_steps == []


def test_jac_composer_analytic_jacobians_recover_tall_score():
    task = GaussianTask(2, rho=0.5)
    f = make_fields(task, n=4, seed=7)
    composer = JacComposer(f)
    theta = np.random.default_rng(8).standard_normal((5, 2))
    for t in (SCHED.grid[9], SCHED.grid[89]):
        got = composer(theta, t)
        want = task.diffused_tall_score(theta, f.xs, t, SCHED)
        assert np.allclose(got, want, rtol=1e-8, atol=1e-10)
    assert composer.floored_steps == []


def test_fnpse_composer_formula():
    task = GmmTask(2)
    f = make_fields(task, n=3, seed=9)
    composer = FnpseComposer(f)
    theta = np.random.default_rng(10).standard_normal((4, 2))
    t = SCHED.grid[49]
    want = (f.eval_multi(theta, t).sum(axis=1)
            + (1 - 3) * (1.0 - t) * task.prior.log_density_grad(theta))
    assert np.allclose(composer(theta, t), want)


def test_gauss_composer_fallback_on_indefinite_lambda():
    """A dominant prior precision trips the SPD check and the first-order rule."""
    task = GaussianTask(2, prior=None)
    f = make_fields(task, n=3, seed=11)
    covs = np.stack([100.0 * np.eye(2)] * 3)      # near-zero observation precisions
    composer = GaussComposer(f, covs, 0.01 * np.eye(2))
    theta = np.random.default_rng(12).standard_normal((4, 2))
    t = SCHED.grid[99]                            # alpha/upsilon ~ 0 at t=1
    got = composer(theta, t)
    assert composer.fallback_steps == [t]
    want = FnpseComposer(f)(theta, t)
    assert np.allclose(got, want)


def test_gauss_composer_shape_validation():
    task = GaussianTask(2)
    f = make_fields(task, n=3, seed=13)
    with pytest.raises(ValueError):
        GaussComposer(f, np.zeros((2, 2, 2)), task.prior.cov)


def test_jac_composer_floors_indefinite_inner_matrix():
    class SpikyFields:
        """Stub whose score Jacobian makes I + upsilon J indefinite."""

        def __init__(self, base):
            self.base = base
            self.task, self.sched = base.task, base.sched
            self.n, self.m = base.n, base.m

        def eval_multi(self, theta, t):
            return self.base.eval_multi(theta, t)

        def prior_score(self, theta, t):
            return self.base.prior_score(theta, t)

        def prior_jacobian(self, theta, t):
            return self.base.prior_jacobian(theta, t)

        def jacobian_multi(self, theta, t):
            N = theta.shape[0]
            i = self.sched.index_of(t)
            bad = -(2.0 / self.sched.upsilon[i]) * np.eye(self.m)
            return np.broadcast_to(bad, (N, self.n, self.m, self.m))

    task = GaussianTask(2)
    f = SpikyFields(make_fields(task, n=2, seed=14))
    composer = JacComposer(f)
    theta = np.zeros((3, 2))
    t = SCHED.grid[49]
    out = composer(theta, t)
    assert np.all(np.isfinite(out))
    assert t in composer.floored_steps


def test_jac_composer_matches_gauss_on_gmm():
    """On the mixture task both precision rules see the same Jacobian truth
    only in the Gaussian limit; here we just require agreement of shapes and
    finiteness plus the n=1 reduction to the single score at small t."""
    task = GmmTask(2)
    f = make_fields(task, n=1, seed=15)
    composer = JacComposer(f)
    theta = np.random.default_rng(16).standard_normal((4, 2))
    t = SCHED.grid[0]
    got = composer(theta, t)
    want = f.eval_multi(theta, t)[:, 0, :]
    assert np.allclose(got, want, atol=1e-8)
