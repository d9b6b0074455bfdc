# jointdiff/diffusion/categorical.py
"""Discrete diffusion over one-hot categorical variables.

States are probability row vectors of length K ("OneHot"); a hard state has
exactly one entry equal to 1. Every function accepts a single vector (K,) or
a batch (B, K) and returns the same rank it was given.
"""

import itertools
from typing import Optional, Union

import numpy as np

from jointdiff.diffusion.schedule import DiscreteSchedule
from jointdiff.errors import ShapeError

Steps = Union[int, np.ndarray]

PROB_TOLERANCE = 1e-9


def one_hot(categories, K: int) -> np.ndarray:
    categories = np.asarray(categories, dtype=np.int64)
    if np.any(categories < 0) or np.any(categories >= K):
        raise ValueError(f"Categories must lie in [0, {K}), got {categories}")
    return np.eye(K)[categories]


def _is_hard(z: np.ndarray) -> bool:
    z = np.atleast_2d(z)
    return bool(np.all((z == 0.0) | (z == 1.0)) and np.all(z.sum(axis=-1) == 1.0))


def check_probs(z: np.ndarray, hard: bool = False) -> np.ndarray:
    """Validate OneHot rows: non-negative, summing to 1, and one-hot if hard."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim not in (1, 2):
        raise ShapeError(f"OneHot must be (K,) or (B, K), got shape {z.shape}")
    if np.any(z < 0.0) or np.any(np.abs(z.sum(axis=-1) - 1.0) > PROB_TOLERANCE):
        raise ValueError("OneHot rows must be non-negative and sum to 1")
    if hard and not _is_hard(z):
        raise ValueError("Expected a hard one-hot state")
    return z


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def draw(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one category per row by inverse-CDF lookup; returns hard one-hots."""
    probs = np.atleast_2d(probs)
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[0])[:, None] * cdf[:, -1:]
    idx = np.minimum((cdf <= u).sum(axis=-1), probs.shape[-1] - 1)
    return one_hot(idx, probs.shape[-1])


def _batched(z: np.ndarray, K: int):
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    if z.shape[-1] != K:
        raise ShapeError(f"OneHot has {z.shape[-1]} categories, schedule has {K}")
    return z, single


def _marginal_probs(z0, t: Steps, sched: DiscreteSchedule) -> np.ndarray:
    """Distribution of z_t given z0: z0 . Q_bar_t (per-sample t allowed)."""
    z0, single = _batched(z0, sched.K)
    steps = np.asarray(t, dtype=np.int64)
    if steps.size and (steps.min() < 0 or steps.max() > sched.T):
        raise ValueError(f"Step {t!r} outside [0, {sched.T}]")
    Q_bar = sched.Q_bar[steps]
    if Q_bar.ndim == 2:
        probs = z0 @ Q_bar
    else:
        probs = np.einsum("bk,bkj->bj", z0, Q_bar)
    return probs[0] if single else probs


def d3pm_sample(z0, t: Steps, sched: DiscreteSchedule, rng: np.random.Generator) -> np.ndarray:
    """Draw z_t ~ Cat(z0 . Q_bar_t)."""
    check_probs(z0, hard=True)
    probs = _marginal_probs(z0, t, sched)
    sample = draw(probs, rng)
    return sample[0] if np.ndim(z0) == 1 else sample


def d3pm_posterior(z_t, x0_probs, t: int, t_prev: int, sched: DiscreteSchedule) -> np.ndarray:
    """p(z_{t_prev} | z_t) mixed over x0 by x0_probs.

    For a fixed x0 = i the j-th component is proportional to
    [Q_{t_prev -> t}]_{j, class(z_t)} * Q_bar_{t_prev}[i, j]. x0 values whose
    normalizer vanishes cannot have produced z_t; they are dropped and the
    mixture weights renormalized.
    """
    t = sched.check_step(t, low=1)
    t_prev = sched.check_step(t_prev)
    if t_prev >= t:
        raise ValueError(f"d3pm_posterior needs t_prev < t, got t_prev={t_prev}, t={t}")

    z_t, single = _batched(z_t, sched.K)
    x0_probs, _ = _batched(x0_probs, sched.K)
    if z_t.shape[0] != x0_probs.shape[0]:
        raise ShapeError(f"Batch sizes differ: {z_t.shape[0]} vs {x0_probs.shape[0]}")

    classes = z_t.argmax(axis=-1)
    likelihood = sched.transition_between(t_prev, t)[:, classes].T   # (B, j)
    prior = sched.Q_bar[t_prev]                                      # (i, j)
    joint = prior[None, :, :] * likelihood[:, None, :]               # (B, i, j)

    norm = joint.sum(axis=-1)
    valid = norm > 0.0
    weights = np.where(valid, x0_probs, 0.0)
    total = weights.sum(axis=-1, keepdims=True)
    if np.any(total <= 0.0):
        raise ValueError("Zero normalizer: no x0 with positive weight is consistent with z_t")

    per_x0 = np.where(valid[..., None], joint / np.where(valid, norm, 1.0)[..., None], 0.0)
    posterior = np.einsum("bi,bij->bj", weights / total, per_x0)
    return posterior[0] if single else posterior


def d3pm_step(z_t, logits, t: int, t_prev: int, sched: DiscreteSchedule,
              rng: np.random.Generator, sample_final: bool = False) -> np.ndarray:
    """One (possibly multi-step) reverse jump driven by x0 logits.

    At t_prev = 0 the posterior argmax is returned unless sample_final is set.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("Categorical logits must be finite")

    posterior = d3pm_posterior(z_t, softmax(logits), t, t_prev, sched)
    batch = np.atleast_2d(posterior)
    if t_prev == 0 and not sample_final:
        result = one_hot(batch.argmax(axis=-1), sched.K)
    else:
        result = draw(batch, rng)
    return result[0] if posterior.ndim == 1 else result


def decode_category(z: np.ndarray) -> Union[int, np.ndarray]:
    """Argmax decoding; ties resolve to the lowest category."""
    z = np.asarray(z)
    idx = z.argmax(axis=-1)
    return int(idx) if z.ndim == 1 else idx


def category_levels(K: int) -> np.ndarray:
    """Input-plane values for each category, spread affinely over [-1, 1]."""
    return np.linspace(-1.0, 1.0, K)


def to_plane_value(z: np.ndarray, K: Optional[int] = None) -> np.ndarray:
    """Expected input-plane value of a (soft or hard) OneHot state."""
    z = np.asarray(z, dtype=np.float64)
    return z @ category_levels(K or z.shape[-1])


def enumerate_posterior(z_t_class: int, x0_class: int, t: int, t_prev: int,
                        sched: DiscreteSchedule) -> np.ndarray:
    """p(z_{t_prev} | z_t, x0) by summing over every chain path z_0 .. z_t.

    Exponential in t; meant as an oracle for small K and T.
    """
    t = sched.check_step(t, low=1)
    t_prev = sched.check_step(t_prev)
    if t_prev >= t:
        raise ValueError(f"enumerate_posterior needs t_prev < t, got t_prev={t_prev}, t={t}")
    K = sched.K
    weights = np.zeros(K)
    for path in itertools.product(range(K), repeat=t):
        if path[-1] != z_t_class:
            continue
        prob, prev = 1.0, x0_class
        for s, state in enumerate(path, start=1):
            prob *= sched.Q[s - 1][prev, state]
            prev = state
        weights[x0_class if t_prev == 0 else path[t_prev - 1]] += prob
    total = weights.sum()
    if total <= 0.0:
        raise ValueError("Zero normalizer: z_t is unreachable from x0")
    return weights / total
