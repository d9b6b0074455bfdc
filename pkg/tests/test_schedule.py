# tests/test_schedule.py
from functools import reduce

import numpy as np
import pytest
from pydantic import ValidationError

from jointdiff.diffusion.schedule import (
    DiscreteSchedule,
    GaussianSchedule,
    ScheduleConfig,
    build_schedules,
    cosine_discrete_schedule,
    cumulative_transition,
    linear_beta_schedule,
    schedule_from_descriptor,
)
from jointdiff.errors import ScheduleError


def test_linear_alpha_bars():
    sched = linear_beta_schedule(4, 0.1, 0.4)
    assert sched.betas == pytest.approx([0.1, 0.2, 0.3, 0.4])
    assert sched.alpha_bars == pytest.approx([1.0, 0.9, 0.72, 0.504, 0.3024])


def test_single_step_schedule():
    sched = linear_beta_schedule(1, 0.5, 0.5)
    assert sched.alpha_bars == pytest.approx([1.0, 0.5])


def test_alpha_bars_strictly_decreasing():
    sched = linear_beta_schedule(1000)
    assert sched.alpha_bars[0] == 1.0
    assert np.all(np.diff(sched.alpha_bars) < 0)
    assert sched.alpha_bars[-1] > 0


@pytest.mark.parametrize("args", [(0,), (10, 0.3, 0.1), (10, 0.0, 0.1), (10, 0.1, 1.5)])
def test_linear_rejects_bad_arguments(args):
    with pytest.raises(ScheduleError):
        linear_beta_schedule(*args)


def test_discrete_identity_and_uniform_steps():
    assert np.array_equal(DiscreteSchedule.from_betas([0.0], 2).transition(1), np.eye(2))
    assert DiscreteSchedule.from_betas([1.0], 2).transition(1) == pytest.approx(np.full((2, 2), 0.5))
    half = DiscreteSchedule.from_betas([0.5], 2).transition(1)
    assert half == pytest.approx(np.array([[0.75, 0.25], [0.25, 0.75]]))


def test_cumulative_transition():
    sched = DiscreteSchedule.from_betas([0.5, 0.5], 2)
    assert np.array_equal(cumulative_transition(sched, 0), np.eye(2))
    assert cumulative_transition(sched, 2) == pytest.approx(np.array([[0.625, 0.375], [0.375, 0.625]]))
    assert sched.transition_between(0, 2) == pytest.approx(sched.Q_bar[2])
    assert np.array_equal(sched.transition_between(1, 1), np.eye(2))
    with pytest.raises(ValueError):
        sched.transition_between(2, 1)


def test_cosine_schedule_is_stochastic_and_ends_near_uniform():
    sched = cosine_discrete_schedule(1000, 3)
    assert np.allclose(sched.Q.sum(axis=-1), 1.0)
    assert np.allclose(sched.Q_bar.sum(axis=-1), 1.0)
    assert np.all(sched.betas <= 0.999)
    assert sched.Q_bar[-1] == pytest.approx(np.full((3, 3), 1 / 3), abs=1e-3)


def test_discrete_rejects_single_category():
    with pytest.raises(ScheduleError):
        cosine_discrete_schedule(10, 1)
    with pytest.raises(ScheduleError):
        DiscreteSchedule.from_betas([0.1], 1)


def test_gaussian_rejects_beta_out_of_range():
    with pytest.raises(ScheduleError):
        GaussianSchedule.from_betas([0.1, 1.2])
    with pytest.raises(ScheduleError):
        GaussianSchedule.from_betas([1.0])


def test_step_outside_range_raises():
    sched = linear_beta_schedule(4, 0.1, 0.4)
    with pytest.raises(ValueError):
        sched.alpha_bar(5)
    with pytest.raises(ValueError):
        sched.beta(0)


@pytest.mark.parametrize("sched", [
    linear_beta_schedule(50),
    GaussianSchedule.from_betas([0.1, 0.2, 0.0]),
    cosine_discrete_schedule(50, 2),
    DiscreteSchedule.from_betas([0.3, 0.6], 3),
])
def test_descriptor_rebuilds_schedule(sched):
    rebuilt = schedule_from_descriptor(sched.descriptor())
    assert type(rebuilt) is type(sched)
    assert np.array_equal(rebuilt.betas, sched.betas)


def test_unknown_descriptor_raises():
    with pytest.raises(ScheduleError):
        schedule_from_descriptor({"family": "gaussian", "kind": "sigmoid", "T": 3})


def test_schedule_config():
    schedules = build_schedules(ScheduleConfig(T=30, n_categories=3))
    assert schedules.gaussian.T == schedules.discrete.T == 30
    assert schedules.discrete.K == 3
    with pytest.raises(ValidationError):
        ScheduleConfig(T=10, unknown=1)
    with pytest.raises(ValidationError):
        ScheduleConfig(beta_start=0.5, beta_end=0.1)


def test_alpha_bars_match_reverse_order_product():
    sched = linear_beta_schedule(1000)
    for t in (1, 10, 250, 999, 1000):
        backwards = 1.0
        for alpha in sched.alphas[:t][::-1]:
            backwards *= alpha
        assert abs(backwards - sched.alpha_bar(t)) <= 1e-12


@pytest.mark.parametrize("K", [2, 3])
def test_cumulative_transition_is_independent_of_grouping(K):
    sched = cosine_discrete_schedule(50, K)
    for t in (1, 7, 25, 50):
        right_first = reduce(lambda acc, q: q @ acc, sched.Q[:t][::-1])
        for m in range(1, t):
            split = reduce(np.matmul, sched.Q[:m]) @ reduce(np.matmul, sched.Q[m:t])
            assert np.max(np.abs(split - sched.Q_bar[t])) <= 1e-12
        assert np.max(np.abs(right_first - sched.Q_bar[t])) <= 1e-12


@pytest.mark.parametrize("K", [2, 3, 5])
def test_transitions_are_symmetric_and_doubly_stochastic(K):
    sched = cosine_discrete_schedule(100, K)
    off_diagonal = ~np.eye(K, dtype=bool)
    for matrix in list(sched.Q) + list(sched.Q_bar):
        assert np.allclose(matrix, matrix.T, atol=1e-12)
        assert np.allclose(matrix.sum(axis=0), 1.0, atol=1e-10)
        assert np.allclose(matrix.sum(axis=1), 1.0, atol=1e-10)
        off = matrix[off_diagonal]
        assert np.allclose(off, off[0], atol=1e-12)


def test_cosine_keep_probability_decreases():
    sched = cosine_discrete_schedule(1000, 2)
    assert sched.keep_bar(0) == 1.0
    assert np.all(np.diff(sched.keep_bars) < 0)
    assert sched.keep_bar(1000) < 0.01


def test_keep_bars_describe_cumulative_transition():
    sched = cosine_discrete_schedule(200, 3)
    for t in (0, 1, 100, 200):
        keep = sched.keep_bar(t)
        expected = keep * np.eye(3) + (1.0 - keep) / 3.0
        assert np.max(np.abs(sched.Q_bar[t] - expected)) <= 1e-10
