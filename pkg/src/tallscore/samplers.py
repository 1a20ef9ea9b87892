"""Backward samplers over composed scores.

DDIM for the precision-weighted composers, annealed (optionally tamed)
Langevin for the first-order composer, the deterministic-averaging baseline
chain, and a MALA reference sampler for targets without closed-form draws.
All samplers are pure functions of (config, rng) and report divergences and
dropped rows instead of raising.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .schedule import DiffusionSchedule

# stochasticity levels paired with step counts so that fewer steps get less
# injected noise
ETA_FOR_T = {50: 0.2, 150: 0.5, 400: 0.8, 1000: 1.0}

DIVERGENCE_NORM = 1e3


def eta_for(T: int) -> float:
    """Default DDIM stochasticity for a step count, 1.0 off the known grid."""
    return ETA_FOR_T.get(T, 1.0)


@dataclass(frozen=True)
class DdimConfig:
    """DDIM transition parameters.

    Attributes:
        eta: stochasticity in [0, 1]; 0 gives the deterministic map.
        sigma_last: noise std of the final step onto t=0.
        clip: half-width of an optional box clamp applied after each step.
    """

    eta: float
    sigma_last: float = 1e-4
    clip: float | None = None

    @classmethod
    def for_T(cls, T: int, clip: float | None = None) -> "DdimConfig":
        return cls(eta=eta_for(T), clip=clip)


@dataclass(frozen=True)
class LangevinConfig:
    """Annealed-Langevin parameters: L inner steps of size tau*(1-a)/sqrt(a)."""

    L: int = 5
    tau: float = 0.5
    tamed: bool = False
    clip: float | None = None


@dataclass
class SampleSet:
    """Accepted draws plus run accounting.

    Invariant: draws contains no non-finite rows; such rows are dropped and
    counted in meta["n_dropped"].
    """

    draws: np.ndarray
    meta: dict = field(default_factory=dict)


def _finalize(theta: np.ndarray, meta: dict) -> SampleSet:
    finite = np.isfinite(theta).all(axis=1)
    meta = dict(meta)
    meta["n_dropped"] = int((~finite).sum())
    return SampleSet(draws=theta[finite], meta=meta)


def _maybe_clip(theta: np.ndarray, clip: float | None) -> np.ndarray:
    if clip is None:
        return theta
    return np.clip(theta, -clip, clip)


def ddim_sample(score_fn, m: int, sched: DiffusionSchedule, cfg: DdimConfig,
                n_draws: int, rng: np.random.Generator) -> SampleSet:
    """Run the DDIM backward chain from N(0, I) at t=1 down to t=0.

    Args:
        score_fn: callable (theta (N, m), t) -> (N, m) composed score.
        m: state dimension.
        sched: diffusion schedule whose grid drives the chain.
        cfg: transition parameters.
        n_draws: number of parallel chains (= returned draws, minus drops).
        rng: seeded generator.

    Returns:
        SampleSet of t=0 draws.
    """
    theta = rng.standard_normal((n_draws, m))
    for i in range(sched.T - 1, -1, -1):
        t = sched.grid[i]
        a, u = sched.alpha[i], sched.upsilon[i]
        if i > 0:
            a_prev, u_prev = sched.alpha[i - 1], sched.upsilon[i - 1]
            sig2 = cfg.eta ** 2 * (u_prev / u) * (1.0 - a / a_prev)
        else:
            a_prev, u_prev = 1.0, 0.0
            sig2 = cfg.sigma_last ** 2
        s = score_fn(theta, t)
        mu0 = (theta + u * s) / math.sqrt(a)
        coef = math.sqrt(max(u_prev - sig2, 0.0))
        mean = math.sqrt(a_prev) * mu0 + coef * (theta - math.sqrt(a) * mu0) / math.sqrt(u)
        sig = math.sqrt(sig2)
        theta = mean if sig == 0.0 else mean + sig * rng.standard_normal(mean.shape)
        theta = _maybe_clip(theta, cfg.clip)
    return _finalize(theta, {"sampler": "ddim", "T": sched.T, "eta": cfg.eta})


def ula_sample(score_fn, m: int, sched: DiffusionSchedule, cfg: LangevinConfig,
               n_draws: int, rng: np.random.Generator) -> SampleSet:
    """Annealed unadjusted Langevin along the backward time grid.

    At each grid time the chain takes L updates with step size
    tau * (1 - a_s) / sqrt(a_s), where a_s is the per-step scale ratio of the
    schedule. Chains whose norm exceeds DIVERGENCE_NORM are frozen, excluded
    from the output, and counted in meta["n_diverged"].
    """
    theta = rng.standard_normal((n_draws, m))
    alive = np.ones(n_draws, dtype=bool)
    for i in range(sched.T - 1, -1, -1):
        if not alive.any():
            break
        t = sched.grid[i]
        a_s = sched.step_alpha[i]
        delta = cfg.tau * (1.0 - a_s) / math.sqrt(a_s)
        for _ in range(cfg.L):
            cur = theta[alive]
            drift = score_fn(cur, t)
            if cfg.tamed:
                norms = np.linalg.norm(drift, axis=1, keepdims=True)
                drift = drift / (1.0 + delta * norms)
            cur = cur + delta * drift + math.sqrt(2.0 * delta) * rng.standard_normal(cur.shape)
            cur = _maybe_clip(cur, cfg.clip)
            theta[alive] = cur
            with np.errstate(over="ignore", invalid="ignore"):
                bad = ~np.isfinite(cur).all(axis=1) | (np.linalg.norm(cur, axis=1) > DIVERGENCE_NORM)
            if bad.any():
                idx = np.flatnonzero(alive)[bad]
                alive[idx] = False
            if not alive.any():
                break
    out = _finalize(theta[alive], {"sampler": "ula", "T": sched.T, "L": cfg.L,
                                   "tau": cfg.tau, "tamed": cfg.tamed})
    out.meta["n_diverged"] = int((~alive).sum())
    return out


def det_gef_sample(fields, sched: DiffusionSchedule, n_draws: int,
                   rng: np.random.Generator, clip: float | None = None) -> SampleSet:
    """Deterministic-averaging baseline chain.

    Each reverse step averages the per-observation DDPM reverse means with a
    prior correction of weight (1-n), under a shared scalar variance
    (1-a_s)/(n - a_s (n-1)); with n=1 this is exactly a DDPM reverse step.
    """
    from .compose import compose_det_gef

    m = fields.m
    theta = rng.standard_normal((n_draws, m))
    for i in range(sched.T - 1, -1, -1):
        t = sched.grid[i]
        a_s = sched.step_alpha[i]
        b = 1.0 - a_s
        s = fields.eval_multi(theta, t)
        s_prior = fields.prior_score(theta, t)
        mu_obs = (theta[:, None, :] + b * s) / math.sqrt(a_s)
        mu_prior = (theta + b * s_prior) / math.sqrt(a_s)
        mean, var = compose_det_gef(mu_obs, mu_prior, a_s)
        theta = mean + math.sqrt(var) * rng.standard_normal(mean.shape)
        theta = _maybe_clip(theta, clip)
    return _finalize(theta, {"sampler": "det_gef", "T": sched.T})


def estimate_posterior_covs(fields, rng: np.random.Generator, T_est: int = 100,
                            n_est: int = 4000, eta: float = 1.0) -> np.ndarray:
    """Empirical t=0 posterior covariance per observation via short DDIM runs.

    Returns an (n, m, m) stack of covariance estimates, eigenvalue-floored at
    1e-6 times the mean eigenvalue so downstream inverses stay well posed.
    """
    from .schedule import make_schedule

    sched = make_schedule(T_est, fields.sched.beta_min, fields.sched.beta_max)
    cfg = DdimConfig(eta=eta)
    covs = np.empty((fields.n, fields.m, fields.m))
    for j in range(fields.n):
        score_j = fields.single_score(j, sched)
        draws = ddim_sample(score_j, fields.m, sched, cfg, n_est, rng).draws
        C = np.cov(draws, rowvar=False).reshape(fields.m, fields.m)
        w, V = np.linalg.eigh(0.5 * (C + C.T))
        w = np.maximum(w, 1e-6 * max(w.mean(), 1e-12))
        covs[j] = (V * w) @ V.T
    return covs


def mala_sample(logp_grad, m: int, n_keep: int, rng: np.random.Generator,
                n_chains: int = 64, step: float = 0.1, burn_frac: float = 0.2,
                init: np.ndarray | None = None) -> SampleSet:
    """Metropolis-adjusted Langevin with parallel chains and burn-in tuning.

    Args:
        logp_grad: callable theta (N, m) -> (logp (N,), grad (N, m)) of the
            (unnormalized) target.
        m: dimension.
        n_keep: number of post-burn-in draws to return.
        rng: seeded generator.
        n_chains: parallel chains; draws pool across chains, no thinning.
        step: initial step size, adapted during burn-in toward acceptance
            in [0.4, 0.7].
        burn_frac: fraction of total steps discarded as burn-in.
        init: optional (n_chains, m) start states, else N(0, I).

    Returns:
        SampleSet with meta acceptance rate; meta["acceptance_collapse"] is
        set when the post-tuning acceptance falls below 0.05.
    """
    keep_steps = math.ceil(n_keep / n_chains)
    total_steps = math.ceil(keep_steps / (1.0 - burn_frac))
    # enough burn-in for the step-size adaptation to settle even when many
    # chains make the kept phase short
    burn_steps = max(total_steps - keep_steps, 200)
    total_steps = burn_steps + keep_steps

    theta = init.copy() if init is not None else rng.standard_normal((n_chains, m))
    logp, grad = logp_grad(theta)
    kept = []
    n_acc = 0
    n_prop = 0
    window_acc, window_n = 0, 0
    for it in range(total_steps):
        prop = theta + step * grad + math.sqrt(2.0 * step) * rng.standard_normal(theta.shape)
        logp_p, grad_p = logp_grad(prop)
        fwd = prop - theta - step * grad
        bwd = theta - prop - step * grad_p
        log_q = (-(bwd * bwd).sum(axis=1) + (fwd * fwd).sum(axis=1)) / (4.0 * step)
        log_acc = logp_p - logp + log_q
        accept = np.log(rng.uniform(size=n_chains)) < log_acc
        theta[accept] = prop[accept]
        logp[accept] = logp_p[accept]
        grad[accept] = grad_p[accept]

        if it < burn_steps:
            window_acc += int(accept.sum())
            window_n += n_chains
            if window_n >= 5 * n_chains:
                rate = window_acc / window_n
                if rate < 0.4:
                    step *= 0.7
                elif rate > 0.7:
                    step *= 1.3
                window_acc, window_n = 0, 0
        else:
            n_acc += int(accept.sum())
            n_prop += n_chains
            kept.append(theta.copy())

    draws = np.concatenate(kept, axis=0)[:n_keep]
    rate = n_acc / max(n_prop, 1)
    meta = {"sampler": "mala", "acceptance": rate, "step": step,
            "n_chains": n_chains, "acceptance_collapse": rate < 0.05}
    return _finalize(draws, meta)
