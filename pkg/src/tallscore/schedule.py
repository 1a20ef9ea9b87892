"""Variance-preserving diffusion schedule on a uniform time grid.

The schedule owns every time-indexed scalar used by the score formulas and
samplers: the scale factors alpha(t), the noise variances upsilon(t) = 1 -
alpha(t), and the per-step scale ratios needed by ancestral samplers. It is
immutable after construction and safe to share across sampling chains.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ScheduleError(ValueError):
    """Invalid schedule parameters."""


class TimeOffGridError(ValueError):
    """A time was requested that is not on the schedule's grid."""


def alpha_fn(t, beta_min: float, beta_max: float):
    """Continuous-time scale factor exp(-int_0^t beta(s) ds) for linear beta."""
    t = np.asarray(t, dtype=float)
    return np.exp(-(beta_min * t + 0.5 * (beta_max - beta_min) * t * t))


@dataclass(frozen=True)
class DiffusionSchedule:
    """Discretized VP schedule on the uniform grid {t_i = i/T, i=1..T}.

    Attributes:
        T: number of time steps (grid points).
        beta_min: noise rate at t=0.
        beta_max: noise rate at t=1.
        grid: times (T,), increasing, closed at t=1, open at t=0.
        alpha: scale factors alpha(t_i), strictly decreasing in (0, 1).
        upsilon: noise variances 1 - alpha(t_i).
    """

    T: int
    beta_min: float
    beta_max: float
    grid: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    upsilon: np.ndarray = field(repr=False)

    @property
    def mean_scale(self) -> np.ndarray:
        return np.sqrt(self.alpha)

    @property
    def noise_std(self) -> np.ndarray:
        return np.sqrt(self.upsilon)

    @property
    def step_alpha(self) -> np.ndarray:
        """Per-step scale ratios alpha(t_i)/alpha(t_{i-1}), with alpha(t_0)=1."""
        prev = np.concatenate(([1.0], self.alpha[:-1]))
        return self.alpha / prev

    def index_of(self, t: float) -> int:
        """Grid index of time t, raising if t is off the grid."""
        i = int(round(t * self.T)) - 1
        if i < 0 or i >= self.T or abs(self.grid[i] - t) > 1e-12:
            raise TimeOffGridError(f"time {t} is not on the grid (T={self.T})")
        return i

    def alpha_at(self, t: float) -> float:
        return float(self.alpha[self.index_of(t)])

    def upsilon_at(self, t: float) -> float:
        return float(self.upsilon[self.index_of(t)])


def make_schedule(T: int, beta_min: float = 0.1, beta_max: float = 20.0) -> DiffusionSchedule:
    """Build a VP schedule with linear beta(t) = beta_min + t (beta_max - beta_min).

    Args:
        T: number of uniform time steps, at least 2.
        beta_min: lower noise rate, positive.
        beta_max: upper noise rate, strictly greater than beta_min.

    Raises:
        ScheduleError: if T < 2 or the beta bounds are not ordered.
    """
    if T < 2:
        raise ScheduleError(f"T must be >= 2, got {T}")
    if not (0 < beta_min < beta_max):
        raise ScheduleError(f"need 0 < beta_min < beta_max, got {beta_min}, {beta_max}")
    grid = np.arange(1, T + 1, dtype=float) / T
    alpha = alpha_fn(grid, beta_min, beta_max)
    return DiffusionSchedule(
        T=T, beta_min=beta_min, beta_max=beta_max,
        grid=grid, alpha=alpha, upsilon=1.0 - alpha,
    )


def diffuse(theta0: np.ndarray, t: float, noise: np.ndarray,
            sched: DiffusionSchedule) -> np.ndarray:
    """Forward-diffuse theta0 to time t: sqrt(alpha_t) theta0 + sqrt(upsilon_t) z."""
    i = sched.index_of(t)
    return np.sqrt(sched.alpha[i]) * np.asarray(theta0) + np.sqrt(sched.upsilon[i]) * np.asarray(noise)
