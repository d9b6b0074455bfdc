# tests/test_gaussian.py
import numpy as np
import pytest

from jointdiff.diffusion.gaussian import (
    ddim_step,
    ddpm_step,
    posterior_mean_variance,
    predict_x0,
    q_sample,
    q_step,
)
from jointdiff.diffusion.schedule import GaussianSchedule, linear_beta_schedule
from jointdiff.errors import ShapeError


def test_q_sample_closed_form():
    sched = GaussianSchedule.from_betas([0.36])
    assert q_sample(1.0, 1, 0.0, sched) == pytest.approx(0.8)


def test_q_sample_at_zero_is_x0():
    sched = linear_beta_schedule(10)
    x0 = np.array([0.3, -0.7])
    assert np.array_equal(q_sample(x0, 0, np.array([5.0, 5.0]), sched), x0)


def test_q_sample_per_sample_steps():
    sched = linear_beta_schedule(10)
    x0 = np.ones((3, 2, 2))
    eps = np.zeros((3, 2, 2))
    out = q_sample(x0, np.array([0, 5, 10]), eps, sched)
    for i, t in enumerate([0, 5, 10]):
        assert np.allclose(out[i], np.sqrt(sched.alpha_bars[t]))


def test_predict_x0_example():
    sched = GaussianSchedule.from_betas([0.75])
    assert predict_x0(1.4330, 0.5, 1, sched) == pytest.approx(2.0, abs=1e-3)


def test_ddim_example():
    # alpha_bar_1 = 0.64, alpha_bar_2 = 0.25
    sched = GaussianSchedule.from_betas([0.36, 1.0 - 0.25 / 0.64])
    assert ddim_step(1.4330, 0.5, 2, 1, sched) == pytest.approx(1.9, abs=1e-3)


def test_ddim_with_equal_alpha_bars_is_identity():
    sched = GaussianSchedule.from_betas([0.1, 0.0])
    x = np.array([0.4, -1.3, 2.0])
    assert ddim_step(x, np.array([0.1, 0.2, -0.5]), 2, 1, sched) == pytest.approx(x, abs=1e-12)


def test_ddim_recovers_x0_with_exact_noise(rng):
    sched = linear_beta_schedule(100)
    x0 = rng.standard_normal((4, 4))
    eps = rng.standard_normal((4, 4))
    x = q_sample(x0, 100, eps, sched)
    grid = [100, 80, 55, 30, 10, 1, 0]
    for t, t_prev in zip(grid[:-1], grid[1:]):
        x = ddim_step(x, eps, t, t_prev, sched)
    assert x == pytest.approx(x0, abs=1e-10)


def test_ddim_rejects_non_decreasing_steps():
    sched = linear_beta_schedule(10)
    with pytest.raises(ValueError):
        ddim_step(0.0, 0.0, 3, 3, sched)
    with pytest.raises(ShapeError):
        ddim_step(np.zeros(2), np.zeros(3), 3, 1, sched)


def test_ddpm_zero_beta_is_identity():
    sched = GaussianSchedule.from_betas([0.2, 0.0])
    x = np.array([1.0, -2.0])
    assert np.array_equal(ddpm_step(x, np.array([9.0, 9.0]), 2, np.array([3.0, 3.0]), sched), x)


def test_ddpm_last_step_ignores_noise():
    sched = linear_beta_schedule(10)
    x = np.array([0.5, -0.5])
    eps = np.array([0.1, 0.2])
    a = ddpm_step(x, eps, 1, np.array([10.0, -10.0]), sched)
    b = ddpm_step(x, eps, 1, np.zeros(2), sched)
    assert np.array_equal(a, b)


def test_ddpm_mean_matches_posterior_with_exact_noise():
    sched = linear_beta_schedule(3, 0.1, 0.3)
    x0 = np.array([0.7, -0.2])
    x_t = np.array([0.1, 0.9])
    t = 3
    eps_hat = (x_t - np.sqrt(sched.alpha_bars[t]) * x0) / np.sqrt(1 - sched.alpha_bars[t])
    mean, var = posterior_mean_variance(x0, x_t, t, sched)
    assert ddpm_step(x_t, eps_hat, t, np.zeros(2), sched) == pytest.approx(mean, abs=1e-12)

    rng = np.random.default_rng(3)
    n = 100_000
    draws = ddpm_step(np.full(n, x_t[0]), np.full(n, eps_hat[0]), t, rng.standard_normal(n), sched)
    assert abs(draws.mean() - mean[0]) < 3 * np.sqrt(var / n)
    assert draws.var() == pytest.approx(var, rel=0.02)


def test_q_step_matches_marginal():
    sched = linear_beta_schedule(100)
    rng = np.random.default_rng(11)
    n = 100_000
    x = np.full(n, 1.5)
    for t in range(1, 101):
        x = q_step(x, t, rng.standard_normal(n), sched)
    ab = sched.alpha_bars[100]
    assert abs(x.mean() - np.sqrt(ab) * 1.5) < 3 * np.sqrt((1 - ab) / n)
