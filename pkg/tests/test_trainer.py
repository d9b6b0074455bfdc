# tests/test_trainer.py
import numpy as np
import pytest

from jointdiff.data.synthdata import generate_dataset, split
from jointdiff.errors import DivergenceError
from jointdiff.model import trainer
from jointdiff.model.joint import JointLoss, encode_batch
from jointdiff.model.trainer import TrainConfig, evaluate_loss, train
from jointdiff.nn import autograd as ag
from jointdiff.nn.denoiser import init_params


@pytest.fixture
def splits(tiny_generator):
    dataset = split(generate_dataset(16, tiny_generator, seed=3), (0.75, 0.25, 0.0), seed=3)
    return dataset.subset("train"), dataset.subset("val")


def _train(splits, tiny_config, small_schedules, **overrides):
    config = TrainConfig(**{"epochs": 2, "batch_size": 4, **overrides})
    return train(splits[0], splits[1], config, tiny_config, small_schedules, seed=5)


def test_same_seed_same_checkpoint(splits, tiny_config, small_schedules):
    a = _train(splits, tiny_config, small_schedules)
    b = _train(splits, tiny_config, small_schedules)
    assert a.to_bytes() == b.to_bytes()


def test_zero_learning_rate_keeps_initial_parameters(splits, tiny_config, small_schedules):
    checkpoint = _train(splits, tiny_config, small_schedules, lr=0.0)
    initial = init_params(tiny_config, np.random.default_rng(trainer._streams(5)["init"]))
    for name, node in initial.items():
        assert np.array_equal(checkpoint.params[name], node.value)


def test_history_and_best_epoch(splits, tiny_config, small_schedules):
    seen = []
    config = TrainConfig(epochs=3, batch_size=4)
    checkpoint = train(splits[0], splits[1], config, tiny_config, small_schedules, seed=5, on_epoch=seen.append)
    assert [r.epoch for r in checkpoint.history] == [1, 2, 3]
    assert seen == checkpoint.history
    val = [r.val_loss for r in checkpoint.history]
    assert checkpoint.val_loss == min(val)
    assert checkpoint.epoch == int(np.argmin(val)) + 1
    assert np.isfinite(checkpoint.initial_val_loss)
    for r in checkpoint.history:
        assert r.train_loss == pytest.approx(r.image_term + r.age_term + r.sex_term)


def test_empty_validation_falls_back_to_training(splits, tiny_config, small_schedules, caplog):
    checkpoint = train(splits[0], [], TrainConfig(epochs=1, batch_size=4), tiny_config, small_schedules)
    assert len(checkpoint.history) == 1
    assert "Validation split is empty" in caplog.text


def test_empty_training_split_raises(splits, tiny_config, small_schedules):
    with pytest.raises(ValueError):
        train([], splits[1], TrainConfig(epochs=1), tiny_config, small_schedules)


def test_non_finite_loss_raises_divergence(splits, tiny_config, small_schedules, monkeypatch):
    real_loss = trainer.joint_loss
    calls = {"n": 0}

    def exploding(batch, params, config, image_weight=1.0):
        calls["n"] += 1
        loss = real_loss(batch, params, config, image_weight)
        # the first call is the initial validation pass
        if calls["n"] > 1:
            return JointLoss(ag.constant(np.nan), np.nan, np.nan, np.nan)
        return loss

    monkeypatch.setattr(trainer, "joint_loss", exploding)
    with pytest.raises(DivergenceError) as info:
        train(splits[0], splits[1], TrainConfig(epochs=1, batch_size=4), tiny_config, small_schedules)
    assert info.value.step == 1


def test_validation_loss_repeats_exactly(splits, tiny_config, small_schedules):
    state = encode_batch(splits[1])
    params = init_params(tiny_config, np.random.default_rng(0), zero_init_heads=False)
    seed_seq = trainer._streams(0)["validation"]
    first = evaluate_loss(state, params, tiny_config, small_schedules, seed_seq, 4)
    second = evaluate_loss(state, params, tiny_config, small_schedules, seed_seq, 4)
    assert first == second


def test_frozen_parameters_keep_initial_validation_loss(splits, tiny_config, small_schedules):
    checkpoint = _train(splits, tiny_config, small_schedules, lr=0.0)
    for record in checkpoint.history:
        assert record.val_loss == checkpoint.initial_val_loss
