# tests/test_acceptance.py
"""End-to-end runs at full scale. Slow: pass --runslow."""

import numpy as np
import pytest

from jointdiff.config import RunConfig
from jointdiff.data.synthdata import generate_dataset, split
from jointdiff.diffusion.schedule import build_schedules
from jointdiff.model.joint import JointModel
from jointdiff.model.sampler import estimate_age, plan_from_config, predict_sex, sample_unconditional
from jointdiff.model.trainer import train
from jointdiff.tools.metrics import eval_metrics, marginal_report

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def run_config():
    return RunConfig()


@pytest.fixture(scope="module")
def dataset(run_config):
    data = generate_dataset(run_config.data.n_subjects, run_config.data.generator, seed=run_config.seed)
    return split(data, run_config.data.fractions, seed=run_config.seed)


@pytest.fixture(scope="module")
def checkpoint(run_config, dataset):
    return train(dataset.subset("train"), dataset.subset("val"), run_config.train, run_config.denoiser,
                 build_schedules(run_config.schedule), seed=run_config.seed)


@pytest.fixture(scope="module")
def model(checkpoint):
    return JointModel.from_checkpoint(checkpoint)


@pytest.fixture(scope="module")
def test_split(dataset):
    records = dataset.subset("test")
    return (np.stack([r.image for r in records]), np.array([r.age for r in records]),
            np.array([r.sex for r in records]))


def _plan(model, run_config):
    return plan_from_config(model.schedules.gaussian.T, run_config.sampler)


def test_protocol_constants(run_config):
    assert run_config.schedule.T == 1000
    assert run_config.sampler.n_continuous == 50
    assert run_config.sampler.k_discrete == 20
    assert run_config.sampler.n_inference_samples == 3


def test_training_halves_validation_loss(checkpoint):
    assert checkpoint.val_loss <= 0.5 * checkpoint.initial_val_loss


def test_age_regression_pattern(model, run_config, test_split):
    images, ages, sexes = test_split
    kwargs = dict(plan=_plan(model, run_config), config=run_config.sampler)
    known_image = estimate_age(model, images, rng=np.random.default_rng(1), **kwargs)
    known_both = estimate_age(model, images, sexes, rng=np.random.default_rng(2), **kwargs)
    known_none = estimate_age(model, rng=np.random.default_rng(3), n_subjects=len(ages), **kwargs)
    known_sex = estimate_age(model, None, sexes, rng=np.random.default_rng(6), **kwargs)

    image = eval_metrics(known_image.estimate, ages, "regression", samples=known_image.samples)
    both = eval_metrics(known_both.estimate, ages, "regression", samples=known_both.samples)
    none = eval_metrics(known_none.estimate, ages, "regression", samples=known_none.samples)
    sex_only = eval_metrics(known_sex.estimate, ages, "regression", samples=known_sex.samples)

    assert image.mae <= 0.4 * none.mae
    assert none.mae == pytest.approx(17.5, rel=0.2)
    assert both.mae == pytest.approx(image.mae, rel=0.15)
    assert none.mean_sample_variance >= 2 * image.mean_sample_variance
    assert sex_only.mean_sample_variance >= 2 * image.mean_sample_variance


def test_sex_classification_from_image(model, run_config, test_split):
    images, _, sexes = test_split
    result = predict_sex(model, images, plan=_plan(model, run_config), rng=np.random.default_rng(4),
                         config=run_config.sampler)
    assert eval_metrics(result.category, sexes, "classification").accuracy >= 0.90


def test_unconditional_marginals(model, run_config):
    records = sample_unconditional(model, 200, _plan(model, run_config), np.random.default_rng(5))
    assert np.mean([r.age for r in records]) == pytest.approx(55.0, abs=5.0)
    assert np.mean([r.sex == 0 for r in records]) == pytest.approx(0.5, abs=0.10)


def test_unconditional_images_match_training_images(model, run_config, dataset):
    records = sample_unconditional(model, 200, _plan(model, run_config), np.random.default_rng(7))
    reference = dataset.subset("train")
    cfg = dataset.config
    ref = marginal_report([r.image for r in reference], [r.age for r in reference], [r.sex for r in reference], cfg)
    got = marginal_report([r.image for r in records], [r.age for r in records], [r.sex for r in records], cfg)

    assert got.pixel_mean == pytest.approx(ref.pixel_mean, abs=0.1)
    assert got.pixel_std == pytest.approx(ref.pixel_std, rel=0.15)
    assert got.oracle_age_mean == pytest.approx(ref.oracle_age_mean, abs=5.0)
    assert got.oracle_sex_share == pytest.approx(0.5, abs=0.10)
    # images must agree with the labels drawn alongside them
    assert got.coherence_sex_accuracy >= 0.85
    assert got.coherence_age_mae <= 10.0


def test_training_is_reproducible(run_config, dataset):
    small = run_config.train.model_copy(update={"epochs": 1})
    again = train(dataset.subset("train"), dataset.subset("val"), small, run_config.denoiser,
                  build_schedules(run_config.schedule), seed=run_config.seed)
    twice = train(dataset.subset("train"), dataset.subset("val"), small, run_config.denoiser,
                  build_schedules(run_config.schedule), seed=run_config.seed)
    assert again.to_bytes() == twice.to_bytes()
