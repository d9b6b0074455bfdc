# jointdiff/model/trainer.py
"""Training loop with per-epoch validation and best-epoch selection."""

import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from jointdiff.diffusion.schedule import Schedules
from jointdiff.errors import DivergenceError
from jointdiff.model.checkpoint import Checkpoint, EpochRecord
from jointdiff.model.joint import (
    DEFAULT_AGE_RANGE,
    AgeRange,
    JointState,
    PatientRecord,
    encode_batch,
    joint_loss,
    make_batch,
)
from jointdiff.nn import autograd as ag
from jointdiff.nn.denoiser import DenoiserConfig, Params, init_params, parameter_count
from jointdiff.nn.optim import Adam

logger = logging.getLogger(__name__)


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lr: float = Field(1e-3, ge=0.0)
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = Field(1e-8, gt=0.0)
    batch_size: int = Field(32, ge=1)
    epochs: int = Field(200, ge=1)
    image_weight: float = Field(1.0, ge=0.0)
    val_repeats: int = Field(1, ge=1)


def _slice(state: JointState, idx: np.ndarray) -> JointState:
    return JointState(state.z_image[idx], state.z_age[idx], state.z_sex[idx], state.t[idx])


def _streams(seed: int) -> Dict[str, np.random.SeedSequence]:
    names = ("init", "order", "t", "noise", "validation")
    return dict(zip(names, np.random.SeedSequence(seed).spawn(len(names))))


def _fixed_children(seed_seq: np.random.SeedSequence, n: int) -> List[np.random.SeedSequence]:
    # spawn() advances the parent, so children are rebuilt from its spawn key
    return [np.random.SeedSequence(seed_seq.entropy, spawn_key=tuple(seed_seq.spawn_key) + (i,),
                                   pool_size=seed_seq.pool_size) for i in range(n)]


def evaluate_loss(state: JointState, params: Params, config: DenoiserConfig, schedules: Schedules,
                  seed_seq: np.random.SeedSequence, batch_size: int, image_weight: float = 1.0,
                  repeats: int = 1) -> float:
    """Mean joint loss over a fixed draw of steps and noise.

    The generators are rebuilt from `seed_seq` on every call, so repeated
    evaluations see identical corruption and differ only through params.
    """
    rng_t, rng_noise = (np.random.default_rng(s) for s in _fixed_children(seed_seq, 2))
    total, count = 0.0, 0
    for _ in range(repeats):
        for start in range(0, state.batch_size, batch_size):
            idx = np.arange(start, min(start + batch_size, state.batch_size))
            batch = make_batch(_slice(state, idx), rng_t, rng_noise, schedules)
            loss = joint_loss(batch, params, config, image_weight)
            total += loss.total.item() * idx.size
            count += idx.size
    return total / count


def train(train_records: Sequence[PatientRecord], val_records: Sequence[PatientRecord],
          config: TrainConfig, denoiser_config: DenoiserConfig, schedules: Schedules, seed: int = 0,
          age_range: AgeRange = DEFAULT_AGE_RANGE,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> Checkpoint:
    """Fit the denoiser and return the checkpoint with the lowest validation loss.

    Args:
        train_records: Records to optimize on.
        val_records: Records scored after every epoch; falls back to the
            training records when empty.
        config: Optimizer and loop settings.
        denoiser_config: Architecture to build.
        schedules: Gaussian and categorical noise schedules.
        seed: Root seed; every random stream is derived from it.
        age_range: Encoding range for ages.
        on_epoch: Called with each finished epoch's record.

    Returns:
        Checkpoint holding the best parameters and the full loss history.
    """
    if not train_records:
        raise ValueError("Training split is empty")
    if not val_records:
        logger.warning("Validation split is empty; selecting the epoch on training loss instead")
        val_records = train_records

    K = denoiser_config.n_categories
    train_state = encode_batch(train_records, age_range, K)
    val_state = encode_batch(val_records, age_range, K)

    streams = _streams(seed)
    params = init_params(denoiser_config, np.random.default_rng(streams["init"]))
    rng_order = np.random.default_rng(streams["order"])
    rng_t = np.random.default_rng(streams["t"])
    rng_noise = np.random.default_rng(streams["noise"])
    optimizer = Adam(params.values(), lr=config.lr, betas=config.betas, eps=config.eps)

    def validate() -> float:
        return evaluate_loss(val_state, params, denoiser_config, schedules, streams["validation"],
                             config.batch_size, config.image_weight, config.val_repeats)

    initial_val = validate()
    logger.info(
        f"Training {parameter_count(params)} parameters on {train_state.batch_size} records "
        f"({val_state.batch_size} validation); initial val loss {initial_val:.5f}"
    )

    history: List[EpochRecord] = []
    best_params = {name: np.array(p.value) for name, p in params.items()}
    best_val, best_epoch = float("inf"), 0
    n = train_state.batch_size

    for epoch in range(1, config.epochs + 1):
        order = rng_order.permutation(n)
        sums = np.zeros(4)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = make_batch(_slice(train_state, idx), rng_t, rng_noise, schedules)
            loss = joint_loss(batch, params, denoiser_config, config.image_weight)
            value = loss.total.item()
            if not np.isfinite(value):
                raise DivergenceError(
                    f"Non-finite loss at optimizer step {optimizer.step_count + 1} (epoch {epoch})",
                    step=optimizer.step_count + 1,
                )
            ag.backward(loss.total)
            optimizer.step()
            sums += np.array([value, loss.image, loss.age, loss.sex]) * idx.size

        means = sums / n
        val_loss = validate()
        record = EpochRecord(epoch, float(means[0]), float(val_loss),
                             float(means[1]), float(means[2]), float(means[3]))
        history.append(record)
        logger.info(
            f"epoch {epoch}/{config.epochs}: train {record.train_loss:.5f} val {val_loss:.5f} "
            f"(image {record.image_term:.4f}, age {record.age_term:.4f}, sex {record.sex_term:.4f})"
        )
        if val_loss < best_val:
            best_val, best_epoch = val_loss, epoch
            best_params = {name: np.array(p.value) for name, p in params.items()}
        if on_epoch is not None:
            on_epoch(record)

    logger.info(f"Selected epoch {best_epoch} with val loss {best_val:.5f} (initial {initial_val:.5f})")
    return Checkpoint(
        gaussian=schedules.gaussian,
        discrete=schedules.discrete,
        denoiser_config=denoiser_config,
        params=best_params,
        epoch=best_epoch,
        val_loss=float(best_val),
        initial_val_loss=float(initial_val),
        history=history,
        seed=seed,
        age_range=tuple(float(a) for a in age_range),
        image_weight=config.image_weight,
    )
