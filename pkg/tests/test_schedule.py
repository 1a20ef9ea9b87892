import numpy as np
import pytest

from tallscore.schedule import (DiffusionSchedule, ScheduleError, TimeOffGridError,
                                alpha_fn, diffuse, make_schedule)


def test_alpha_fn_matches_closed_form():
    # exp(-(b_min t + (b_max - b_min) t^2 / 2)) at a few hand-picked points
    assert alpha_fn(0.0, 0.1, 20.0) == pytest.approx(1.0)
    assert alpha_fn(1.0, 0.1, 20.0) == pytest.approx(np.exp(-(0.1 + 0.5 * 19.9)))
    assert alpha_fn(0.5, 0.1, 20.0) == pytest.approx(np.exp(-(0.05 + 0.5 * 19.9 * 0.25)))


def test_grid_is_uniform_and_closed_at_one():
    sched = make_schedule(50)
    assert sched.grid.shape == (50,)
    assert sched.grid[0] == pytest.approx(1.0 / 50)
    assert sched.grid[-1] == pytest.approx(1.0)
    assert np.allclose(np.diff(sched.grid), 1.0 / 50)


def test_alpha_strictly_decreasing_in_unit_interval():
    for T in (2, 50, 1000):
        sched = make_schedule(T)
        assert np.all(sched.alpha > 0.0)
        assert np.all(sched.alpha < 1.0)
        assert np.all(np.diff(sched.alpha) < 0.0)
        assert np.allclose(sched.upsilon, 1.0 - sched.alpha)


def test_step_alpha_telescopes_to_alpha():
    sched = make_schedule(150)
    assert np.allclose(np.cumprod(sched.step_alpha), sched.alpha)
    # first ratio is alpha(t_1) itself since alpha(t_0) = 1
    assert sched.step_alpha[0] == pytest.approx(sched.alpha[0])


def test_index_of_roundtrip_and_off_grid():
    sched = make_schedule(400)
    for i in (0, 17, 399):
        assert sched.index_of(sched.grid[i]) == i
    with pytest.raises(TimeOffGridError):
        sched.index_of(0.12345)
    with pytest.raises(TimeOffGridError):
        sched.index_of(0.0)


def test_lookup_helpers():
    sched = make_schedule(100)
    t = sched.grid[42]
    assert sched.alpha_at(t) == pytest.approx(sched.alpha[42])
    assert sched.upsilon_at(t) == pytest.approx(sched.upsilon[42])
    assert np.allclose(sched.mean_scale ** 2, sched.alpha)
    assert np.allclose(sched.noise_std ** 2, sched.upsilon)


def test_invalid_parameters_rejected():
    with pytest.raises(ScheduleError):
        make_schedule(1)
    with pytest.raises(ScheduleError):
        make_schedule(10, beta_min=2.0, beta_max=1.0)
    with pytest.raises(ScheduleError):
        make_schedule(10, beta_min=-0.1, beta_max=1.0)


def test_schedule_is_immutable():
    sched = make_schedule(10)
    with pytest.raises(Exception):
        sched.T = 20


def test_diffuse_moments():
    """Forward diffusion has mean sqrt(a) theta0 and variance upsilon."""
    sched = make_schedule(20)
    rng = np.random.default_rng(0)
    theta0 = np.full((50_000, 3), 2.0)
    t = sched.grid[9]
    out = diffuse(theta0, t, rng.standard_normal(theta0.shape), sched)
    i = sched.index_of(t)
    assert np.allclose(out.mean(axis=0), np.sqrt(sched.alpha[i]) * 2.0, atol=0.02)
    assert np.allclose(out.var(axis=0), sched.upsilon[i], atol=0.02)


def test_same_parameters_give_identical_schedules():
    a = make_schedule(77)
    b = make_schedule(77)
    assert isinstance(a, DiffusionSchedule)
    assert np.array_equal(a.alpha, b.alpha)
    assert np.array_equal(a.grid, b.grid)
