# jointdiff/diffusion/gaussian.py
"""Gaussian forward/reverse kernels for the continuous variables (image, age).

Steps may be a single int or, for the forward marginal, one int per sample
along the leading axis.
"""

from typing import Tuple, Union

import numpy as np

from jointdiff.diffusion.schedule import GaussianSchedule
from jointdiff.errors import ShapeError

Steps = Union[int, np.ndarray]


def _steps(t: Steps, sched: GaussianSchedule, low: int = 0) -> np.ndarray:
    steps = np.asarray(t)
    if not np.issubdtype(steps.dtype, np.integer):
        if not np.all(steps == np.round(steps)):
            raise ValueError(f"Steps must be integers, got {t!r}")
        steps = steps.astype(np.int64)
    if steps.size and (steps.min() < low or steps.max() > sched.T):
        raise ValueError(f"Step {t!r} outside [{low}, {sched.T}]")
    return steps


def _per_sample(coef: np.ndarray, ndim: int) -> np.ndarray:
    """Reshape a per-sample coefficient so it broadcasts over trailing axes."""
    coef = np.asarray(coef)
    if coef.ndim == 0:
        return coef
    return coef.reshape(coef.shape + (1,) * (ndim - coef.ndim))


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def q_sample(x0, t: Steps, eps, sched: GaussianSchedule) -> np.ndarray:
    """Closed-form forward marginal sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    _same_shape(x0, eps, "q_sample")
    ab = _per_sample(sched.alpha_bars[_steps(t, sched)], x0.ndim)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def q_step(x_prev, t: int, eps, sched: GaussianSchedule) -> np.ndarray:
    """Single forward kernel x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps."""
    x_prev = np.asarray(x_prev, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    _same_shape(x_prev, eps, "q_step")
    beta = sched.beta(t)
    return np.sqrt(1.0 - beta) * x_prev + np.sqrt(beta) * eps


def predict_x0(x_t, eps_hat, t: Steps, sched: GaussianSchedule) -> np.ndarray:
    """Invert the forward marginal given a noise estimate."""
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    _same_shape(x_t, eps_hat, "predict_x0")
    ab = _per_sample(sched.alpha_bars[_steps(t, sched)], x_t.ndim)
    if np.any(ab <= 0.0):
        raise ValueError("predict_x0 needs alpha_bar_t > 0")
    return (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def posterior_mean_variance(x0, x_t, t: int, sched: GaussianSchedule) -> Tuple[np.ndarray, float]:
    """Mean and variance of q(x_{t-1} | x_t, x0)."""
    t = sched.check_step(t, low=1)
    beta = sched.betas[t - 1]
    ab, ab_prev = sched.alpha_bars[t], sched.alpha_bars[t - 1]
    x0 = np.asarray(x0, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    mean = (np.sqrt(ab_prev) * beta / (1.0 - ab)) * x0 + (np.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab)) * x_t
    return mean, float(beta * (1.0 - ab_prev) / (1.0 - ab))


def ddpm_step(x_t, eps_hat, t: int, noise, sched: GaussianSchedule) -> np.ndarray:
    """Ancestral reverse step; the last step (t = 1) returns the mean."""
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    _same_shape(x_t, eps_hat, "ddpm_step")
    t = sched.check_step(t, low=1)

    beta = float(sched.betas[t - 1])
    ab, ab_prev = sched.alpha_bars[t], sched.alpha_bars[t - 1]
    if beta == 0.0:
        return x_t.copy()

    mean = (x_t - (beta / np.sqrt(1.0 - ab)) * eps_hat) / np.sqrt(1.0 - beta)
    if t == 1:
        return mean

    noise = np.asarray(noise, dtype=np.float64)
    _same_shape(x_t, noise, "ddpm_step noise")
    sigma = np.sqrt(beta * (1.0 - ab_prev) / (1.0 - ab))
    return mean + sigma * noise


def ddim_step(x_t, eps_hat, t: int, t_prev: int, sched: GaussianSchedule) -> np.ndarray:
    """Deterministic (eta = 0) jump from t to t_prev."""
    t = sched.check_step(t, low=1)
    t_prev = sched.check_step(t_prev)
    if t_prev >= t:
        raise ValueError(f"ddim_step needs t_prev < t, got t_prev={t_prev}, t={t}")
    x0_hat = predict_x0(x_t, eps_hat, t, sched)
    ab_prev = sched.alpha_bars[t_prev]
    return np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * np.asarray(eps_hat, dtype=np.float64)
