# jointdiff/diffusion/schedule.py
"""Noise schedules shared by every diffused variable.

Two families live here: the Gaussian chain (betas, alphas and the running
products alpha_bars) and the uniform-transition categorical chain (per-step
matrices Q_t and their cumulative products Q_bar). Both are immutable once
built and can be rebuilt from the plain-dict descriptor stored in checkpoint
headers.
"""

import logging
from dataclasses import dataclass, field
from functools import reduce
from typing import Any, Dict, Literal, NamedTuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from jointdiff.errors import ScheduleError

logger = logging.getLogger(__name__)

COSINE_OFFSET = 0.008
MAX_DISCRETE_BETA = 0.999


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


class NoiseSchedule:
    """Base class for schedules."""

    family = "base"
    T: int

    def descriptor(self) -> Dict[str, Any]:
        """Plain-dict description that rebuilds this schedule."""
        raise NotImplementedError("The base schedule does not implement descriptor")

    def check_step(self, t: int, low: int = 0) -> int:
        """Validate a step index against [low, T] and return it as int."""
        step = int(t)
        if step != t or step < low or step > self.T:
            raise ValueError(f"Step {t!r} outside [{low}, {self.T}]")
        return step


@dataclass(frozen=True, eq=False)
class GaussianSchedule(NoiseSchedule):
    """Gaussian chain: betas[t-1] is beta_t, alpha_bars[0] = 1."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    kind: str = "custom"
    params: Dict[str, float] = field(default_factory=dict)

    family = "gaussian"

    @classmethod
    def from_betas(cls, betas, kind: str = "custom", **params) -> "GaussianSchedule":
        """Build a schedule from explicit betas in [0, 1].

        Zero betas are accepted here so identity steps can be expressed;
        `validate` enforces the strict (0, 1] rule used by named schedules.
        """
        betas = np.array(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise ScheduleError(f"betas must be a non-empty 1-D sequence, got shape {betas.shape}")
        if not np.all(np.isfinite(betas)) or np.any(betas < 0.0) or np.any(betas > 1.0):
            raise ScheduleError("every beta must lie in [0, 1]")

        alphas = 1.0 - betas
        alpha_bars = np.concatenate([[1.0], np.cumprod(alphas)])
        if alpha_bars[-1] <= 0.0:
            raise ScheduleError("alpha_bars[T] must stay positive; some beta equals 1")

        return cls(
            T=int(betas.size),
            betas=_frozen(betas),
            alphas=_frozen(alphas),
            alpha_bars=_frozen(alpha_bars),
            kind=kind,
            params=dict(params),
        )

    def beta(self, t: int) -> float:
        return float(self.betas[self.check_step(t, low=1) - 1])

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[self.check_step(t)])

    def validate(self) -> "GaussianSchedule":
        if np.any(self.betas <= 0.0):
            raise ScheduleError("every beta must lie in (0, 1]")
        if not np.all(np.diff(self.alpha_bars) < 0.0):
            raise ScheduleError("alpha_bars must be strictly decreasing")
        return self

    def descriptor(self) -> Dict[str, Any]:
        desc: Dict[str, Any] = {"family": self.family, "kind": self.kind, "T": self.T}
        if self.kind == "custom":
            desc["betas"] = [float(b) for b in self.betas]
        desc.update(self.params)
        return desc


@dataclass(frozen=True, eq=False)
class DiscreteSchedule(NoiseSchedule):
    """Categorical chain with Q_t = (1 - beta_t) I + (beta_t / K) 11^T.

    Q[t-1] holds Q_t; Q_bar[t] = Q_1 ... Q_t with Q_bar[0] = I. All Q_bar
    entries are cached at construction. keep_bars[t] = prod_{s<=t} (1 - beta_s)
    is the probability mass Q_bar[t] keeps on the diagonal beyond uniform:
    Q_bar[t] = keep_bars[t] I + (1 - keep_bars[t]) / K 11^T.
    """

    T: int
    K: int
    betas: np.ndarray
    Q: np.ndarray
    Q_bar: np.ndarray
    keep_bars: np.ndarray
    kind: str = "custom"
    params: Dict[str, float] = field(default_factory=dict)

    family = "discrete"

    @classmethod
    def from_betas(cls, betas, K: int, kind: str = "custom", **params) -> "DiscreteSchedule":
        betas = np.array(betas, dtype=np.float64)
        if int(K) != K or K < 2:
            raise ScheduleError(f"K must be an integer >= 2, got {K}")
        K = int(K)
        if betas.ndim != 1 or betas.size == 0:
            raise ScheduleError(f"betas must be a non-empty 1-D sequence, got shape {betas.shape}")
        if not np.all(np.isfinite(betas)) or np.any(betas < 0.0) or np.any(betas > 1.0):
            raise ScheduleError("every beta must lie in [0, 1]")

        eye = np.eye(K)
        uniform = np.full((K, K), 1.0 / K)
        Q = (1.0 - betas)[:, None, None] * eye + betas[:, None, None] * uniform

        Q_bar = np.empty((betas.size + 1, K, K))
        Q_bar[0] = eye
        for t in range(1, betas.size + 1):
            Q_bar[t] = Q_bar[t - 1] @ Q[t - 1]

        return cls(
            T=int(betas.size),
            K=K,
            betas=_frozen(betas),
            Q=_frozen(Q),
            Q_bar=_frozen(Q_bar),
            keep_bars=_frozen(np.concatenate([[1.0], np.cumprod(1.0 - betas)])),
            kind=kind,
            params=dict(params),
        )

    def transition(self, t: int) -> np.ndarray:
        """Single-step matrix Q_t."""
        return self.Q[self.check_step(t, low=1) - 1]

    def transition_between(self, s: int, t: int) -> np.ndarray:
        """Kernel from step s to step t: Q_{s+1} ... Q_t (identity when s == t)."""
        s, t = self.check_step(s), self.check_step(t)
        if s > t:
            raise ValueError(f"transition_between needs s <= t, got s={s}, t={t}")
        if s == t:
            return np.eye(self.K)
        return reduce(np.matmul, self.Q[s:t])

    def keep_bar(self, t: int) -> float:
        return float(self.keep_bars[self.check_step(t)])

    def descriptor(self) -> Dict[str, Any]:
        desc: Dict[str, Any] = {"family": self.family, "kind": self.kind, "T": self.T, "K": self.K}
        if self.kind == "custom":
            desc["betas"] = [float(b) for b in self.betas]
        desc.update(self.params)
        return desc


def linear_beta_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> GaussianSchedule:
    """Gaussian schedule with betas interpolated linearly from beta_start to beta_end."""
    if int(T) != T or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T}")
    if not (0.0 < beta_start <= 1.0 and 0.0 < beta_end <= 1.0):
        raise ScheduleError(f"beta endpoints must lie in (0, 1], got {beta_start}, {beta_end}")
    if beta_start > beta_end:
        raise ScheduleError(f"beta_start {beta_start} exceeds beta_end {beta_end}")

    betas = np.linspace(beta_start, beta_end, int(T))
    schedule = GaussianSchedule.from_betas(
        betas, kind="linear", beta_start=float(beta_start), beta_end=float(beta_end)
    )
    return schedule.validate()


def cosine_discrete_schedule(T: int, K: int, s: float = COSINE_OFFSET) -> DiscreteSchedule:
    """Categorical schedule whose keep-probability follows a squared cosine."""
    if int(T) != T or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T}")
    if int(K) != K or K < 2:
        raise ScheduleError(f"K must be an integer >= 2, got {K}")

    steps = np.arange(int(T) + 1, dtype=np.float64) / T
    f = np.cos((steps + s) / (1.0 + s) * np.pi / 2.0) ** 2
    betas = np.clip(1.0 - f[1:] / f[:-1], 0.0, MAX_DISCRETE_BETA)

    return DiscreteSchedule.from_betas(betas, K, kind="cosine", s=float(s))


def cumulative_transition(schedule: DiscreteSchedule, t: int) -> np.ndarray:
    """Return Q_bar_t = Q_1 ... Q_t from the cache (identity at t = 0)."""
    return schedule.Q_bar[schedule.check_step(t)]


def schedule_from_descriptor(desc: Dict[str, Any]) -> NoiseSchedule:
    """Factory that rebuilds a schedule from its descriptor."""
    assert desc is not None, "Descriptor cannot be None"

    family = desc.get("family")
    kind = desc.get("kind")

    if family == "gaussian" and kind == "linear":
        return linear_beta_schedule(desc["T"], desc["beta_start"], desc["beta_end"])
    elif family == "gaussian" and kind == "custom":
        return GaussianSchedule.from_betas(desc["betas"])
    elif family == "discrete" and kind == "cosine":
        return cosine_discrete_schedule(desc["T"], desc["K"], desc.get("s", COSINE_OFFSET))
    elif family == "discrete" and kind == "custom":
        return DiscreteSchedule.from_betas(desc["betas"], desc["K"])
    else:
        raise ScheduleError(f"Unsupported schedule descriptor: family={family!r}, kind={kind!r}")


class ScheduleConfig(BaseModel):
    """Schedule settings; every field is echoed into run directories."""

    model_config = ConfigDict(extra="forbid")

    T: int = Field(1000, ge=1)
    gaussian_kind: Literal["linear"] = "linear"
    beta_start: float = Field(1e-4, gt=0.0, le=1.0)
    beta_end: float = Field(0.02, gt=0.0, le=1.0)
    discrete_kind: Literal["cosine"] = "cosine"
    cosine_offset: float = Field(COSINE_OFFSET, gt=0.0)
    n_categories: int = Field(2, ge=2)

    @model_validator(mode="after")
    def _ordered_endpoints(self) -> "ScheduleConfig":
        if self.beta_start > self.beta_end:
            raise ValueError(f"beta_start {self.beta_start} exceeds beta_end {self.beta_end}")
        return self


class Schedules(NamedTuple):
    gaussian: GaussianSchedule
    discrete: DiscreteSchedule


def build_schedules(cfg: ScheduleConfig) -> Schedules:
    gaussian = linear_beta_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    discrete = cosine_discrete_schedule(cfg.T, cfg.n_categories, cfg.cosine_offset)
    logger.debug(
        f"Built schedules: T={cfg.T}, alpha_bar_T={gaussian.alpha_bars[-1]:.3e}, "
        f"K={cfg.n_categories}"
    )
    return Schedules(gaussian, discrete)
