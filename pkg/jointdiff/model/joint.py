# jointdiff/model/joint.py
"""Joint state over (image, age, sex) and the training objective.

Every component of a JointState shares one diffusion step per sample. Ages
are carried in the encoded space [-1, 1]; sex as a K-way one-hot row.
"""

import logging
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from jointdiff.diffusion import categorical, gaussian
from jointdiff.diffusion.schedule import Schedules
from jointdiff.errors import ShapeError
from jointdiff.nn import autograd as ag
from jointdiff.nn.autograd import Node
from jointdiff.nn.denoiser import DenoiserConfig, DenoiserInput, DenoiserOutput, Params, forward

logger = logging.getLogger(__name__)

AgeRange = Tuple[float, float]
DEFAULT_AGE_RANGE: AgeRange = (20.0, 90.0)


@dataclass(frozen=True, eq=False)
class PatientRecord:
    image: np.ndarray
    age: float
    sex: int

    def __post_init__(self):
        image = np.asarray(self.image, dtype=np.float64)
        if image.ndim != 2:
            raise ShapeError(f"Record image must be 2-D, got shape {image.shape}")
        if not np.all(np.isfinite(image)) or np.any(np.abs(image) > 1.0):
            raise ValueError("Record image entries must lie in [-1, 1]")
        if int(self.sex) != self.sex or self.sex < 0:
            raise ValueError(f"Sex must be a non-negative category, got {self.sex}")
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "age", float(self.age))
        object.__setattr__(self, "sex", int(self.sex))


@dataclass
class JointState:
    """Batch of noisy tuples: z_image (B, H, W), z_age (B,), z_sex (B, K), t (B,)."""

    z_image: np.ndarray
    z_age: np.ndarray
    z_sex: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.z_image = np.asarray(self.z_image, dtype=np.float64)
        self.z_age = np.asarray(self.z_age, dtype=np.float64)
        self.z_sex = np.asarray(self.z_sex, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.int64)
        B = self.z_image.shape[0] if self.z_image.ndim == 3 else -1
        if B < 0:
            raise ShapeError(f"z_image must be (B, H, W), got {self.z_image.shape}")
        if self.z_age.shape != (B,) or self.z_sex.ndim != 2 or self.z_sex.shape[0] != B:
            raise ShapeError(
                f"Components disagree on batch size: image {self.z_image.shape}, "
                f"age {self.z_age.shape}, sex {self.z_sex.shape}"
            )
        if self.t.shape != (B,):
            raise ShapeError(f"t must hold one step per sample ({B},), got {self.t.shape}")

    @property
    def batch_size(self) -> int:
        return self.z_image.shape[0]

    @property
    def n_categories(self) -> int:
        return self.z_sex.shape[1]


def encode_age(age, age_range: AgeRange = DEFAULT_AGE_RANGE) -> np.ndarray:
    lo, hi = _check_range(age_range)
    age = np.asarray(age, dtype=np.float64)
    if np.any(age < lo) or np.any(age > hi):
        raise ValueError(f"Age {age} outside range [{lo}, {hi}]")
    return 2.0 * (age - lo) / (hi - lo) - 1.0


def decode_age(z_age, age_range: AgeRange = DEFAULT_AGE_RANGE) -> np.ndarray:
    """Inverse affine map, clamping z_age to [-1, 1] first."""
    lo, hi = _check_range(age_range)
    z = np.clip(np.asarray(z_age, dtype=np.float64), -1.0, 1.0)
    return lo + (z + 1.0) * (hi - lo) / 2.0


def _check_range(age_range: AgeRange) -> AgeRange:
    lo, hi = float(age_range[0]), float(age_range[1])
    if not lo < hi:
        raise ValueError(f"Age range needs lo < hi, got [{lo}, {hi}]")
    return lo, hi


def encode_batch(records: Sequence[PatientRecord], age_range: AgeRange = DEFAULT_AGE_RANGE,
                 n_categories: int = 2) -> JointState:
    """Encode clean records as a t = 0 state."""
    if not records:
        raise ValueError("Cannot encode an empty batch")
    shape = records[0].image.shape
    for r in records:
        if r.image.shape != shape:
            raise ShapeError(f"Record images differ in shape: {r.image.shape} vs {shape}")
    return JointState(
        z_image=np.stack([r.image for r in records]),
        z_age=encode_age([r.age for r in records], age_range),
        z_sex=categorical.one_hot([r.sex for r in records], n_categories),
        t=np.zeros(len(records), dtype=np.int64),
    )


def encode_record(record: PatientRecord, age_range: AgeRange = DEFAULT_AGE_RANGE,
                  n_categories: int = 2) -> JointState:
    return encode_batch([record], age_range, n_categories)


def decode_state(state: JointState, age_range: AgeRange = DEFAULT_AGE_RANGE) -> List[PatientRecord]:
    """Map a t = 0 state back to records (image clamped, age clamped, sex argmax)."""
    images = np.clip(state.z_image, -1.0, 1.0)
    ages = decode_age(state.z_age, age_range)
    sexes = categorical.decode_category(state.z_sex)
    return [PatientRecord(images[i], ages[i], sexes[i]) for i in range(state.batch_size)]


def forward_diffuse(z0: JointState, t: Union[int, np.ndarray], rng: np.random.Generator,
                    schedules: Schedules) -> Tuple[JointState, np.ndarray, np.ndarray]:
    """Corrupt every component of z0 to the shared step t.

    Returns the noisy state and the Gaussian draws used for image and age.
    """
    B = z0.batch_size
    steps = np.broadcast_to(np.asarray(t, dtype=np.int64), (B,)).copy()
    if np.any(steps < 1) or np.any(steps > schedules.gaussian.T):
        raise ValueError(f"Step {t!r} outside [1, {schedules.gaussian.T}]")

    eps_image = rng.standard_normal(z0.z_image.shape)
    eps_age = rng.standard_normal(B)
    z_image = gaussian.q_sample(z0.z_image, steps, eps_image, schedules.gaussian)
    z_age = gaussian.q_sample(z0.z_age, steps, eps_age, schedules.gaussian)
    z_sex = categorical.d3pm_sample(z0.z_sex, steps, schedules.discrete, rng)
    return JointState(z_image, z_age, z_sex, steps), eps_image, eps_age


def to_denoiser_input(state: JointState) -> DenoiserInput:
    return DenoiserInput(state.z_image, state.z_age, state.z_sex, state.t)


class TrainingBatch(NamedTuple):
    z0: JointState
    zt: JointState
    eps_image: np.ndarray
    eps_age: np.ndarray


class JointLoss(NamedTuple):
    """Total loss node plus its three terms for logging."""

    total: Node
    image: float
    age: float
    sex: float


def combine_loss(outputs: DenoiserOutput, eps_image: np.ndarray, eps_age: np.ndarray,
                 sex_target: np.ndarray, image_weight: float = 1.0) -> JointLoss:
    """Weighted per-pixel image MSE + age MSE + sex cross-entropy, batch averaged."""
    dtype = outputs.eps_image.dtype
    if outputs.eps_image.shape != np.shape(eps_image):
        raise ShapeError(f"eps_image target {np.shape(eps_image)} vs prediction {outputs.eps_image.shape}")
    if outputs.eps_age.shape != np.shape(eps_age):
        raise ShapeError(f"eps_age target {np.shape(eps_age)} vs prediction {outputs.eps_age.shape}")
    if outputs.sex_logits.shape != np.shape(sex_target):
        raise ShapeError(f"sex target {np.shape(sex_target)} vs logits {outputs.sex_logits.shape}")

    image_term = ag.reduce_mean(ag.square(ag.sub(outputs.eps_image, ag.constant(eps_image, dtype=dtype))))
    age_term = ag.reduce_mean(ag.square(ag.sub(outputs.eps_age, ag.constant(eps_age, dtype=dtype))))
    B = outputs.sex_logits.shape[0]
    log_probs = ag.log_softmax(outputs.sex_logits)
    sex_term = ag.scale(ag.reduce_sum(ag.multiply(ag.constant(sex_target, dtype=dtype), log_probs)), -1.0 / B)

    total = ag.add(ag.add(ag.scale(image_term, image_weight), age_term), sex_term)
    return JointLoss(total, image_term.item(), age_term.item(), sex_term.item())


def joint_loss(batch: TrainingBatch, params: Params, config: DenoiserConfig,
               image_weight: float = 1.0) -> JointLoss:
    """Denoise a diffused batch and score it against the recorded targets."""
    if np.any(batch.z0.t != 0):
        raise ValueError("Clean states must sit at t = 0")
    if np.any(batch.zt.t < 1):
        raise ValueError("Diffused states need t >= 1")
    outputs = forward(to_denoiser_input(batch.zt), params, config)
    return combine_loss(outputs, batch.eps_image, batch.eps_age, batch.z0.z_sex, image_weight)


def make_batch(z0: JointState, rng_t: np.random.Generator, rng_noise: np.random.Generator,
               schedules: Schedules, t: Optional[np.ndarray] = None) -> TrainingBatch:
    """Draw per-sample steps uniformly from {1..T} (unless given) and diffuse."""
    if t is None:
        t = rng_t.integers(1, schedules.gaussian.T + 1, size=z0.batch_size)
    zt, eps_image, eps_age = forward_diffuse(z0, t, rng_noise, schedules)
    return TrainingBatch(z0, zt, eps_image, eps_age)


class JointModel:
    """Trained denoiser bundled with its schedules and encoding ranges."""

    def __init__(self, params: Params, config: DenoiserConfig, schedules: Schedules,
                 age_range: AgeRange = DEFAULT_AGE_RANGE):
        # parameters enter as constants here
        self.params: Params = {name: ag.constant(p.value) for name, p in params.items()}
        self.config = config
        self.schedules = schedules
        self.age_range = _check_range(age_range)

    @classmethod
    def from_checkpoint(cls, checkpoint) -> "JointModel":
        return cls(checkpoint.param_nodes(), checkpoint.denoiser_config,
                   Schedules(checkpoint.gaussian, checkpoint.discrete), checkpoint.age_range)

    @property
    def n_categories(self) -> int:
        return self.config.n_categories

    @property
    def side(self) -> int:
        return self.config.side

    def predict(self, state: JointState) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (eps_image, eps_age, sex_logits) as float64 arrays."""
        out = forward(to_denoiser_input(state), self.params, self.config)
        return (out.eps_image.value.astype(np.float64),
                out.eps_age.value.astype(np.float64),
                out.sex_logits.value.astype(np.float64))
