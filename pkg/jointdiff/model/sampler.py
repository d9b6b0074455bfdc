# jointdiff/model/sampler.py
"""Joint reverse sampling with per-step overwriting of known components.

Image and age follow a deterministic DDIM walk over the continuous grid; sex
takes jump-posterior updates at the (coarser) discrete grid and is held
fixed in between. After every update, known components are replaced by a
fresh forward draw at the current level, and by their exact values at 0.
"""

import logging
from dataclasses import dataclass
from typing import Iterable, List, Literal, NamedTuple, Optional, Sequence, Set

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from jointdiff.diffusion import categorical, gaussian
from jointdiff.errors import NonFiniteError, ShapeError
from jointdiff.model.joint import AgeRange, JointModel, JointState, PatientRecord, decode_state, encode_age

logger = logging.getLogger(__name__)

KNOWN_COMPONENTS = ("image", "age", "sex")


class SamplerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_continuous: int = Field(50, ge=1)
    k_discrete: int = Field(20, ge=1)
    n_inference_samples: int = Field(3, ge=1)
    resample_loops: int = Field(1, ge=1, le=1)
    categorical_final: Literal["argmax", "sample"] = "argmax"
    batch_size: int = Field(64, ge=1)

    @model_validator(mode="after")
    def _check_counts(self) -> "SamplerConfig":
        if self.k_discrete > self.n_continuous:
            raise ValueError(f"k_discrete {self.k_discrete} exceeds n_continuous {self.n_continuous}")
        return self


@dataclass(frozen=True)
class SamplerPlan:
    """Descending step grids, both starting at T and ending at 0."""

    continuous: np.ndarray
    discrete: np.ndarray

    @property
    def T(self) -> int:
        return int(self.continuous[0])

    def transitions(self) -> Iterable[tuple]:
        return zip(self.continuous[:-1].tolist(), self.continuous[1:].tolist())


def build_plan(T: int, n_continuous: int = 50, k_discrete: int = 20) -> SamplerPlan:
    """Evenly spaced continuous grid with an evenly sub-sampled discrete grid inside it."""
    if not 1 <= k_discrete <= n_continuous <= T:
        raise ValueError(
            f"Need 1 <= k_discrete <= n_continuous <= T, got k={k_discrete}, n={n_continuous}, T={T}"
        )
    continuous = np.round(np.linspace(T, 0, n_continuous + 1)).astype(np.int64)
    picks = np.round(np.linspace(0, n_continuous, k_discrete + 1)).astype(np.int64)
    discrete = continuous[picks]
    if np.any(np.diff(continuous) >= 0) or np.any(np.diff(discrete) >= 0):
        raise ValueError(f"Plan grids are not strictly decreasing for T={T}, n={n_continuous}, k={k_discrete}")
    return SamplerPlan(continuous, discrete)


def plan_from_config(T: int, config: SamplerConfig) -> SamplerPlan:
    return build_plan(T, config.n_continuous, config.k_discrete)


@dataclass
class ConditioningMask:
    """Which components of each trajectory are known, with their values.

    Continuous values are stored encoded; `age_years` keeps the raw ages so
    known ages are reported verbatim.
    """

    image_mask: np.ndarray   # (B, H, W) in {0, 1}
    image_value: np.ndarray  # (B, H, W)
    age_known: np.ndarray    # (B,) bool
    age_value: np.ndarray    # (B,) encoded
    age_years: np.ndarray    # (B,) raw, nan when unknown
    sex_known: np.ndarray    # (B,) bool
    sex_value: np.ndarray    # (B,) int

    def __post_init__(self):
        self.image_mask = np.asarray(self.image_mask, dtype=np.float64)
        if not np.all((self.image_mask == 0.0) | (self.image_mask == 1.0)):
            raise ValueError("Image mask entries must be 0 or 1")
        B = self.image_mask.shape[0]
        if np.shape(self.image_value) != self.image_mask.shape:
            raise ShapeError(f"image_value shape {np.shape(self.image_value)} vs mask {self.image_mask.shape}")
        for name in ("age_known", "age_value", "age_years", "sex_known", "sex_value"):
            if np.shape(getattr(self, name)) != (B,):
                raise ShapeError(f"{name} must have shape ({B},), got {np.shape(getattr(self, name))}")

    @property
    def batch_size(self) -> int:
        return self.image_mask.shape[0]

    @classmethod
    def unconditional(cls, batch_size: int, side: int) -> "ConditioningMask":
        return cls.build(batch_size, side)

    @classmethod
    def build(cls, batch_size: int, side: int, age_range: AgeRange = (20.0, 90.0), n_categories: int = 2,
              images: Optional[np.ndarray] = None, ages: Optional[np.ndarray] = None,
              sexes: Optional[np.ndarray] = None, pixel_mask: Optional[np.ndarray] = None) -> "ConditioningMask":
        """Mask with the given components known for every trajectory.

        `pixel_mask` (H, W) or (B, H, W) restricts which image pixels are
        known; without it a given image is fully known.
        """
        B = batch_size
        image_mask = np.zeros((B, side, side))
        image_value = np.zeros((B, side, side))
        if images is not None:
            images = np.asarray(images, dtype=np.float64)
            if images.shape != (B, side, side):
                raise ShapeError(f"Known images must be ({B}, {side}, {side}), got {images.shape}")
            if np.any(np.abs(images) > 1.0):
                raise ValueError("Known image entries must lie in [-1, 1]")
            image_value = images
            image_mask = np.ones((B, side, side))
            if pixel_mask is not None:
                image_mask = np.broadcast_to(np.asarray(pixel_mask, dtype=np.float64), (B, side, side)).copy()
        elif pixel_mask is not None:
            raise ValueError("A pixel mask needs known images")

        age_known = np.zeros(B, dtype=bool)
        age_value = np.zeros(B)
        age_years = np.full(B, np.nan)
        if ages is not None:
            ages = np.asarray(ages, dtype=np.float64)
            if ages.shape != (B,):
                raise ShapeError(f"Known ages must be ({B},), got {ages.shape}")
            age_known[:] = True
            age_value = encode_age(ages, age_range)
            age_years = ages.copy()

        sex_known = np.zeros(B, dtype=bool)
        sex_value = np.zeros(B, dtype=np.int64)
        if sexes is not None:
            sexes = np.asarray(sexes)
            if sexes.shape != (B,):
                raise ShapeError(f"Known sexes must be ({B},), got {sexes.shape}")
            if np.any(sexes < 0) or np.any(sexes >= n_categories):
                raise ValueError(f"Known sexes must lie in [0, {n_categories}), got {sexes}")
            sex_known[:] = True
            sex_value = sexes.astype(np.int64)

        return cls(image_mask, image_value, age_known, age_value, age_years, sex_known, sex_value)

    @classmethod
    def from_records(cls, records: Sequence[PatientRecord], known: Set[str], age_range: AgeRange = (20.0, 90.0),
                     n_categories: int = 2, pixel_mask: Optional[np.ndarray] = None) -> "ConditioningMask":
        unknown = set(known) - set(KNOWN_COMPONENTS)
        if unknown:
            raise ValueError(f"Unknown conditioning components: {sorted(unknown)}")
        if not records:
            raise ValueError("Cannot condition on an empty record list")
        return cls.build(
            len(records), records[0].image.shape[0], age_range, n_categories,
            images=np.stack([r.image for r in records]) if "image" in known else None,
            ages=np.array([r.age for r in records]) if "age" in known else None,
            sexes=np.array([r.sex for r in records]) if "sex" in known else None,
            pixel_mask=pixel_mask,
        )

    def take(self, idx: np.ndarray) -> "ConditioningMask":
        return ConditioningMask(self.image_mask[idx], self.image_value[idx], self.age_known[idx],
                                self.age_value[idx], self.age_years[idx], self.sex_known[idx],
                                self.sex_value[idx])

    def repeat(self, n: int) -> "ConditioningMask":
        """Repeat every trajectory n times (subject-major order)."""
        return self.take(np.repeat(np.arange(self.batch_size), n))


class _Overwrite:
    def __init__(self, mask: ConditioningMask, model: JointModel, rng: np.random.Generator):
        self.mask = mask
        self.model = model
        self.rng = rng
        self.known_image = mask.image_mask == 1.0
        self.known_sex = categorical.one_hot(mask.sex_value, model.n_categories)

    def continuous(self, z_image: np.ndarray, z_age: np.ndarray, t: int):
        sched = self.model.schedules.gaussian
        if np.any(self.known_image):
            if t == 0:
                known = self.mask.image_value
            else:
                known = gaussian.q_sample(self.mask.image_value, t,
                                          self.rng.standard_normal(z_image.shape), sched)
            z_image = np.where(self.known_image, known, z_image)
        if np.any(self.mask.age_known):
            if t == 0:
                known = self.mask.age_value
            else:
                known = gaussian.q_sample(self.mask.age_value, t, self.rng.standard_normal(z_age.shape), sched)
            z_age = np.where(self.mask.age_known, known, z_age)
        return z_image, z_age

    def sex(self, z_sex: np.ndarray, t: int) -> np.ndarray:
        if not np.any(self.mask.sex_known):
            return z_sex
        if t == 0:
            known = self.known_sex
        else:
            known = categorical.d3pm_sample(self.known_sex, t, self.model.schedules.discrete, self.rng)
        return np.where(self.mask.sex_known[:, None], known, z_sex)


def _check_finite(step: int, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"Non-finite sampler state at step {step}", stage=step)


def sample_conditional(model: JointModel, mask: ConditioningMask, plan: SamplerPlan,
                       rng: np.random.Generator, categorical_final: str = "argmax") -> List[PatientRecord]:
    """Draw one record per trajectory in `mask`, keeping its known components fixed."""
    if plan.T != model.schedules.gaussian.T:
        raise ValueError(f"Plan starts at {plan.T} but the schedules have T={model.schedules.gaussian.T}")
    side, K = model.side, model.n_categories
    B = mask.batch_size
    if mask.image_mask.shape != (B, side, side):
        raise ShapeError(f"Mask image shape {mask.image_mask.shape} does not match the model side {side}")

    gauss, discrete = model.schedules.gaussian, model.schedules.discrete
    sample_final = categorical_final == "sample"
    discrete_steps = set(plan.discrete.tolist())
    overwrite = _Overwrite(mask, model, rng)

    z_image = rng.standard_normal((B, side, side))
    z_age = rng.standard_normal(B)
    z_sex = categorical.draw(np.full((B, K), 1.0 / K), rng)

    sex_level = plan.T
    z_image, z_age = overwrite.continuous(z_image, z_age, plan.T)
    z_sex = overwrite.sex(z_sex, sex_level)

    for t, t_prev in plan.transitions():
        state = JointState(z_image, z_age, z_sex, np.full(B, t))
        eps_image, eps_age, logits = model.predict(state)
        z_image = gaussian.ddim_step(z_image, eps_image, t, t_prev, gauss)
        z_age = gaussian.ddim_step(z_age, eps_age, t, t_prev, gauss)
        if t_prev in discrete_steps:
            z_sex = categorical.d3pm_step(z_sex, logits, sex_level, t_prev, discrete, rng, sample_final)
            sex_level = t_prev
            z_sex = overwrite.sex(z_sex, sex_level)
        z_image, z_age = overwrite.continuous(z_image, z_age, t_prev)
        _check_finite(t_prev, z_image, z_age, z_sex)

    records = decode_state(JointState(z_image, z_age, z_sex, np.zeros(B, dtype=np.int64)), model.age_range)
    return [
        PatientRecord(r.image, mask.age_years[i], r.sex) if mask.age_known[i] else r
        for i, r in enumerate(records)
    ]


def sample_unconditional(model: JointModel, n: int, plan: SamplerPlan, rng: np.random.Generator,
                         categorical_final: str = "argmax") -> List[PatientRecord]:
    return sample_conditional(model, ConditioningMask.unconditional(n, model.side), plan, rng, categorical_final)


def sample_batched(model: JointModel, mask: ConditioningMask, plan: SamplerPlan, rng: np.random.Generator,
                   config: SamplerConfig) -> List[PatientRecord]:
    """Run `sample_conditional` over chunks of at most config.batch_size trajectories."""
    records: List[PatientRecord] = []
    for start in range(0, mask.batch_size, config.batch_size):
        idx = np.arange(start, min(start + config.batch_size, mask.batch_size))
        logger.debug(f"Sampling trajectories {start}..{idx[-1]} of {mask.batch_size}")
        records.extend(sample_conditional(model, mask.take(idx), plan, rng, config.categorical_final))
    return records


class AgeEstimate(NamedTuple):
    estimate: np.ndarray   # (N,)
    samples: np.ndarray    # (N, S)
    variance: np.ndarray   # (N,) unbiased


class SexPrediction(NamedTuple):
    category: np.ndarray   # (N,)
    samples: np.ndarray    # (N, S)
    votes: np.ndarray      # (N, K) counts


def majority_vote(samples: np.ndarray, n_categories: int) -> np.ndarray:
    """Modal category per row; ties resolve to the lowest category."""
    samples = np.atleast_2d(samples)
    counts = np.stack([np.bincount(row, minlength=n_categories) for row in samples])
    return counts.argmax(axis=1)


def _subject_count(*arrays) -> int:
    sizes = {len(a) for a in arrays if a is not None}
    if len(sizes) > 1:
        raise ShapeError(f"Known inputs disagree on subject count: {sorted(sizes)}")
    return sizes.pop() if sizes else 0


def estimate_age(model: JointModel, images: Optional[np.ndarray] = None, sexes: Optional[np.ndarray] = None, *,
                 plan: SamplerPlan, rng: np.random.Generator, config: SamplerConfig,
                 n_subjects: Optional[int] = None) -> AgeEstimate:
    """Average of repeated conditional age draws per subject.

    With neither images nor sexes given, `n_subjects` unconditional
    estimates are produced.
    """
    N = _subject_count(images, sexes) or int(n_subjects or 0)
    if N < 1:
        raise ValueError("estimate_age needs known inputs or n_subjects >= 1")
    S = config.n_inference_samples
    mask = ConditioningMask.build(N, model.side, model.age_range, model.n_categories,
                                  images=images, sexes=sexes).repeat(S)
    records = sample_batched(model, mask, plan, rng, config)
    samples = np.array([r.age for r in records]).reshape(N, S)
    variance = samples.var(axis=1, ddof=1) if S > 1 else np.zeros(N)
    return AgeEstimate(samples.mean(axis=1), samples, variance)


def predict_sex(model: JointModel, images: Optional[np.ndarray] = None, ages: Optional[np.ndarray] = None, *,
                plan: SamplerPlan, rng: np.random.Generator, config: SamplerConfig,
                n_subjects: Optional[int] = None) -> SexPrediction:
    """Majority vote over repeated conditional sex draws per subject."""
    N = _subject_count(images, ages) or int(n_subjects or 0)
    if N < 1:
        raise ValueError("predict_sex needs known inputs or n_subjects >= 1")
    S, K = config.n_inference_samples, model.n_categories
    mask = ConditioningMask.build(N, model.side, model.age_range, K, images=images, ages=ages).repeat(S)
    records = sample_batched(model, mask, plan, rng, config)
    samples = np.array([r.sex for r in records], dtype=np.int64).reshape(N, S)
    votes = np.stack([np.bincount(row, minlength=K) for row in samples])
    return SexPrediction(majority_vote(samples, K), samples, votes)


def inpaint(model: JointModel, images: np.ndarray, pixel_mask: np.ndarray, *, plan: SamplerPlan,
            rng: np.random.Generator, config: SamplerConfig, ages: Optional[np.ndarray] = None,
            sexes: Optional[np.ndarray] = None) -> List[PatientRecord]:
    """Complete the unknown pixels (pixel_mask == 0) of each image."""
    images = np.asarray(images, dtype=np.float64)
    mask = ConditioningMask.build(len(images), model.side, model.age_range, model.n_categories,
                                  images=images, ages=ages, sexes=sexes, pixel_mask=pixel_mask)
    return sample_batched(model, mask, plan, rng, config)


def left_half_mask(side: int) -> np.ndarray:
    mask = np.zeros((side, side))
    mask[:, : side // 2] = 1.0
    return mask
