# tests/test_categorical.py
import itertools

import numpy as np
import pytest

from jointdiff.diffusion.categorical import (
    category_levels,
    d3pm_posterior,
    d3pm_sample,
    d3pm_step,
    decode_category,
    enumerate_posterior,
    one_hot,
    to_plane_value,
)
from jointdiff.diffusion.schedule import DiscreteSchedule, cosine_discrete_schedule


def test_sample_at_zero_is_unchanged(rng):
    sched = cosine_discrete_schedule(10, 3)
    z0 = one_hot([0, 2, 1], 3)
    assert np.array_equal(d3pm_sample(z0, 0, sched, rng), z0)


def test_sample_frequency_matches_cumulative_kernel(rng):
    sched = DiscreteSchedule.from_betas([0.5, 0.5], 2)
    n = 100_000
    draws = d3pm_sample(one_hot(np.zeros(n, dtype=int), 2), 2, sched, rng)
    freq = draws[:, 0].mean()
    assert abs(freq - 0.625) < 3 * np.sqrt(0.625 * 0.375 / n)


def test_sample_at_end_of_cosine_chain_is_near_uniform(rng):
    sched = cosine_discrete_schedule(1000, 2)
    n = 100_000
    draws = d3pm_sample(one_hot(np.ones(n, dtype=int), 2), 1000, sched, rng)
    assert abs(draws[:, 0].mean() - 0.5) < 3 * np.sqrt(0.25 / n) + 1e-3


def test_sample_rejects_soft_state(rng):
    sched = cosine_discrete_schedule(10, 2)
    with pytest.raises(ValueError):
        d3pm_sample(np.array([0.4, 0.6]), 3, sched, rng)


def test_posterior_to_zero_with_hard_x0_returns_x0():
    sched = cosine_discrete_schedule(10, 3)
    post = d3pm_posterior(one_hot(1, 3), one_hot(2, 3), 6, 0, sched)
    assert post == pytest.approx(one_hot(2, 3))


def test_posterior_without_noise_returns_z_t():
    sched = DiscreteSchedule.from_betas([0.0, 0.0, 0.0], 3)
    post = d3pm_posterior(one_hot(2, 3), np.full(3, 1 / 3), 3, 1, sched)
    assert post == pytest.approx(one_hot(2, 3))


def test_posterior_small_chain_example():
    sched = DiscreteSchedule.from_betas([0.5, 0.5], 2)
    post = d3pm_posterior(one_hot(0, 2), one_hot(0, 2), 2, 1, sched)
    # Q_1[0, j] * Q_2[j, 0] = (0.75 * 0.75, 0.25 * 0.25)
    assert post == pytest.approx(np.array([0.5625, 0.0625]) / 0.625)


@pytest.mark.parametrize("K,T", [(2, 3), (3, 3), (2, 4)])
def test_posterior_matches_path_enumeration(K, T):
    rng = np.random.default_rng(K * 10 + T)
    sched = DiscreteSchedule.from_betas(rng.uniform(0.05, 0.9, T), K)
    for t in range(1, T + 1):
        for t_prev, z_t, x0 in itertools.product(range(t), range(K), range(K)):
            closed = d3pm_posterior(one_hot(z_t, K), one_hot(x0, K), t, t_prev, sched)
            brute = enumerate_posterior(z_t, x0, t, t_prev, sched)
            assert closed == pytest.approx(brute, abs=1e-12)


def test_posterior_rows_sum_to_one(rng):
    sched = cosine_discrete_schedule(50, 3)
    x0 = rng.dirichlet(np.ones(3), size=20)
    z_t = one_hot(rng.integers(0, 3, 20), 3)
    post = d3pm_posterior(z_t, x0, 40, 17, sched)
    assert np.all(post >= 0)
    assert post.sum(axis=-1) == pytest.approx(np.ones(20))


def test_posterior_drops_impossible_x0():
    # beta = 0 everywhere: only x0 == z_t could have produced z_t
    sched = DiscreteSchedule.from_betas([0.0, 0.0], 2)
    post = d3pm_posterior(one_hot(1, 2), np.array([0.9, 0.1]), 2, 1, sched)
    assert post == pytest.approx(one_hot(1, 2))
    with pytest.raises(ValueError):
        d3pm_posterior(one_hot(1, 2), one_hot(0, 2), 2, 1, sched)


def test_step_with_saturated_logits_returns_class(rng):
    sched = cosine_discrete_schedule(100, 2)
    logits = np.array([[-20.0, 20.0], [20.0, -20.0]])
    z_t = one_hot([0, 1], 2)
    out = d3pm_step(z_t, logits, 50, 0, sched, rng)
    assert np.array_equal(out, one_hot([1, 0], 2))


def test_step_without_noise_keeps_state(rng):
    sched = DiscreteSchedule.from_betas([0.0, 0.0, 0.0, 0.0], 2)
    z_t = one_hot([0, 1, 1], 2)
    out = d3pm_step(z_t, np.zeros((3, 2)), 4, 2, sched, rng)
    assert np.array_equal(out, z_t)


def test_step_frequencies_match_posterior(rng):
    sched = cosine_discrete_schedule(20, 2)
    n = 100_000
    logits = np.array([0.3, -0.4])
    z_t = one_hot(np.zeros(n, dtype=int), 2)
    out = d3pm_step(z_t, np.tile(logits, (n, 1)), 12, 5, sched, rng)
    exact = d3pm_posterior(one_hot(0, 2), np.exp(logits) / np.exp(logits).sum(), 12, 5, sched)
    p = exact[0]
    assert abs(out[:, 0].mean() - p) < 3 * np.sqrt(p * (1 - p) / n)


def test_step_rejects_non_finite_logits(rng):
    sched = cosine_discrete_schedule(10, 2)
    with pytest.raises(ValueError):
        d3pm_step(one_hot(0, 2), np.array([np.nan, 0.0]), 5, 2, sched, rng)


def test_decode_category():
    assert decode_category(np.array([0.5, 0.5])) == 0
    assert decode_category(np.array([0.4, 0.6])) == 1
    assert np.array_equal(decode_category(one_hot([2, 0], 3)), [2, 0])


def test_plane_values():
    assert np.array_equal(category_levels(2), [-1.0, 1.0])
    assert category_levels(3) == pytest.approx([-1.0, 0.0, 1.0])
    assert to_plane_value(np.array([0.25, 0.75])) == pytest.approx(0.5)
