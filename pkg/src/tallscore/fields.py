"""Score-field abstractions over the analytic tasks.

A field set bundles the n per-observation diffused posterior scores and the
diffused prior score behind one batched interface, with evaluation counters
for cost accounting. A seeded smooth perturbation emulates the approximation
error of a learned score network, and a finite-difference helper provides an
independent Jacobian oracle for tests.
"""

from __future__ import annotations

import numpy as np

from .schedule import DiffusionSchedule
from .tasks import diffused_prior_score


class AnalyticFieldSet:
    """Exact per-observation score fields for a task and a fixed observation set.

    Attributes:
        task: a GaussianTask or GmmTask.
        xs: observations, shape (n, m).
        sched: the diffusion schedule shared by all evaluations.
        score_evals: running count of per-observation score evaluations; each
            call to eval_multi adds n regardless of batch size.
        jacobian_evals: same accounting for Jacobian evaluations.
        prior_evals: count of prior-score evaluations.
    """

    def __init__(self, task, xs: np.ndarray, sched: DiffusionSchedule):
        self.task = task
        self.xs = np.atleast_2d(np.asarray(xs, dtype=float))
        self.sched = sched
        self.n = self.xs.shape[0]
        self.m = task.m
        self.score_evals = 0
        self.jacobian_evals = 0
        self.prior_evals = 0

    def eval_multi(self, theta: np.ndarray, t: float) -> np.ndarray:
        """Scores of every p_t(theta_t | x_j), shape (N, n, m)."""
        self.score_evals += self.n
        return self.task.diffused_score_multi(theta, self.xs, t, self.sched)

    def jacobian_multi(self, theta: np.ndarray, t: float) -> np.ndarray:
        """Per-observation score Jacobians, broadcastable to (N, n, m, m)."""
        self.jacobian_evals += self.n
        return self.task.diffused_score_jacobian_multi(theta, self.xs, t, self.sched)

    def prior_score(self, theta: np.ndarray, t: float) -> np.ndarray:
        self.prior_evals += 1
        return diffused_prior_score(self.task.prior, theta, t, self.sched)

    def prior_jacobian(self, theta: np.ndarray, t: float) -> np.ndarray:
        return self.task.prior.diffused_score_jacobian(theta, t, self.sched)

    def single_score(self, j: int, sched: DiffusionSchedule | None = None):
        """Callable (theta, t) -> (N, m) for observation j, sharing the counters.

        A different schedule may be supplied for callers that run on their own
        time grid, such as the short covariance-estimation chains.
        """
        use_sched = sched if sched is not None else self.sched

        def fn(theta: np.ndarray, t: float) -> np.ndarray:
            self.score_evals += 1
            return self.task.diffused_score(theta, self.xs[j], t, use_sched)

        return fn


class NoiseModel:
    """Deterministic smooth corruption standing in for score-network error.

    A fixed two-hidden-layer tanh network of width 64 maps the concatenation
    [theta; x; alpha_t] to a vector in [-1, 1]^m. Weights are drawn once from
    the seed as N(0, 1)/sqrt(fan_in) with no biases, so the corruption is
    reproducible, bounded, and smooth in theta. Internals run in float32.
    """

    WIDTH = 64

    def __init__(self, m: int, seed: int):
        rng = np.random.default_rng(seed)
        d_in = 2 * m + 1
        w = self.WIDTH
        self.m = m
        self.W1 = (rng.standard_normal((d_in, w)) / np.sqrt(d_in)).astype(np.float32)
        self.W2 = (rng.standard_normal((w, w)) / np.sqrt(w)).astype(np.float32)
        self.W3 = (rng.standard_normal((w, m)) / np.sqrt(w)).astype(np.float32)

    def _forward(self, inp: np.ndarray):
        h1 = np.tanh(inp @ self.W1)
        h2 = np.tanh(h1 @ self.W2)
        out = np.tanh(h2 @ self.W3)
        return h1, h2, out

    def __call__(self, inp: np.ndarray) -> np.ndarray:
        """Evaluate on float32 inputs of shape (B, 2m+1), returning (B, m)."""
        return self._forward(inp)[2]

    def value_and_jacobian(self, inp: np.ndarray):
        """Output and its Jacobian with respect to the theta block.

        Args:
            inp: float32 inputs, shape (B, 2m+1).

        Returns:
            out: (B, m) network outputs.
            jac: (B, m, m) with jac[b, i, j] = d out_i / d theta_j.
        """
        h1, h2, out = self._forward(inp)
        m = self.m
        # forward-mode accumulation over the m theta directions
        j1 = self.W1[:m, :][None, :, :] * (1.0 - h1 * h1)[:, None, :]   # (B, m, w)
        j2 = (j1 @ self.W2) * (1.0 - h2 * h2)[:, None, :]               # (B, m, w)
        j3 = (j2 @ self.W3) * (1.0 - out * out)[:, None, :]             # (B, m, m)
        return out, np.transpose(j3, (0, 2, 1))


class PerturbedFieldSet:
    """Analytic field set with seeded corruption of the observation scores.

    The perturbed score is s + eps * sqrt(upsilon_t) * r([theta; x_j; alpha_t])
    with r the NoiseModel; the prior score stays exact. Jacobians include the
    analytic Jacobian of the corruption term.
    """

    def __init__(self, base: AnalyticFieldSet, noise: NoiseModel, eps: float):
        if noise.m != base.m:
            raise ValueError("noise model dimension does not match the task")
        self.base = base
        self.noise = noise
        self.eps = float(eps)
        self.sched = base.sched
        self.n = base.n
        self.m = base.m
        self._xs32 = base.xs.astype(np.float32)

    @property
    def task(self):
        return self.base.task

    @property
    def xs(self) -> np.ndarray:
        return self.base.xs

    @property
    def score_evals(self) -> int:
        return self.base.score_evals

    @property
    def jacobian_evals(self) -> int:
        return self.base.jacobian_evals

    @property
    def prior_evals(self) -> int:
        return self.base.prior_evals

    def _inputs(self, theta: np.ndarray, t: float) -> np.ndarray:
        N, n, m = theta.shape[0], self.n, self.m
        a = self.sched.alpha_at(t)
        inp = np.empty((N, n, 2 * m + 1), dtype=np.float32)
        inp[:, :, :m] = theta.astype(np.float32)[:, None, :]
        inp[:, :, m:2 * m] = self._xs32[None, :, :]
        inp[:, :, -1] = np.float32(a)
        return inp.reshape(N * n, 2 * m + 1)

    def eval_multi(self, theta: np.ndarray, t: float) -> np.ndarray:
        s = self.base.eval_multi(theta, t)
        if self.eps == 0.0:
            return s
        scale = self.eps * np.sqrt(self.sched.upsilon_at(t))
        r = self.noise(self._inputs(theta, t))
        return s + scale * r.reshape(theta.shape[0], self.n, self.m).astype(float)

    def jacobian_multi(self, theta: np.ndarray, t: float) -> np.ndarray:
        jac = self.base.jacobian_multi(theta, t)
        if self.eps == 0.0:
            return jac
        scale = self.eps * np.sqrt(self.sched.upsilon_at(t))
        _, jr = self.noise.value_and_jacobian(self._inputs(theta, t))
        jr = jr.reshape(theta.shape[0], self.n, self.m, self.m).astype(float)
        return jac + scale * jr

    def prior_score(self, theta: np.ndarray, t: float) -> np.ndarray:
        return self.base.prior_score(theta, t)

    def prior_jacobian(self, theta: np.ndarray, t: float) -> np.ndarray:
        return self.base.prior_jacobian(theta, t)

    def single_score(self, j: int, sched: DiffusionSchedule | None = None):
        base_fn = self.base.single_score(j, sched)
        use_sched = sched if sched is not None else self.sched

        def fn(theta: np.ndarray, t: float) -> np.ndarray:
            s = base_fn(theta, t)
            if self.eps == 0.0:
                return s
            scale = self.eps * np.sqrt(use_sched.upsilon_at(t))
            m = self.m
            inp = np.empty((theta.shape[0], 2 * m + 1), dtype=np.float32)
            inp[:, :m] = theta.astype(np.float32)
            inp[:, m:2 * m] = self._xs32[j]
            inp[:, -1] = np.float32(use_sched.alpha_at(t))
            return s + scale * self.noise(inp).astype(float)

        return fn


def jacobian_fd(score_fn, theta: np.ndarray, t: float, h: float | None = None) -> np.ndarray:
    """Central-difference Jacobian of a batched score function, symmetrized.

    Args:
        score_fn: callable (theta, t) -> (N, m).
        theta: evaluation points, shape (N, m).
        t: grid time.
        h: step size; defaults to 1e-4 * (1 + max |theta|).

    Returns:
        Jacobians of shape (N, m, m), averaged with their transposes since
        score Jacobians are Hessians of a log density.
    """
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    N, m = theta.shape
    if h is None:
        h = 1e-4 * (1.0 + np.abs(theta).max())
    jac = np.empty((N, m, m))
    for j in range(m):
        e = np.zeros(m)
        e[j] = h
        jac[:, :, j] = (score_fn(theta + e, t) - score_fn(theta - e, t)) / (2.0 * h)
    return 0.5 * (jac + np.transpose(jac, (0, 2, 1)))
