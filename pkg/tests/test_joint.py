# tests/test_joint.py
import numpy as np
import pytest

from jointdiff.diffusion.categorical import one_hot
from jointdiff.diffusion.schedule import DiscreteSchedule, GaussianSchedule, Schedules
from jointdiff.errors import ShapeError
from jointdiff.model.joint import (
    JointState,
    PatientRecord,
    TrainingBatch,
    combine_loss,
    decode_age,
    decode_state,
    encode_age,
    encode_batch,
    encode_record,
    forward_diffuse,
    joint_loss,
    make_batch,
)
from jointdiff.nn import autograd as ag
from jointdiff.nn.denoiser import DenoiserOutput, init_params


def _records(n, side=2, rng=None):
    rng = rng or np.random.default_rng(0)
    return [
        PatientRecord(rng.uniform(-1, 1, (side, side)), rng.uniform(20, 90), int(rng.integers(0, 2)))
        for _ in range(n)
    ]


def test_age_encoding_examples():
    assert encode_age([20.0, 55.0, 90.0]) == pytest.approx([-1.0, 0.0, 1.0])
    assert decode_age(0.5) == pytest.approx(72.5)
    assert decode_age(1.7) == pytest.approx(90.0)
    assert decode_age(encode_age(55.0)) == 55.0


def test_age_outside_range_raises():
    with pytest.raises(ValueError):
        encode_age(95.0)


def test_record_validation():
    with pytest.raises(ValueError):
        PatientRecord(np.full((2, 2), 1.5), 40.0, 0)
    with pytest.raises(ShapeError):
        PatientRecord(np.zeros(4), 40.0, 0)
    with pytest.raises(ValueError):
        PatientRecord(np.zeros((2, 2)), 40.0, -1)


def test_state_batch_mismatch_raises():
    with pytest.raises(ShapeError):
        JointState(np.zeros((2, 4, 4)), np.zeros(3), np.zeros((2, 2)), np.zeros(2))


def test_encode_decode_records():
    records = [PatientRecord(np.zeros((2, 2)), 55.0, 1), PatientRecord(np.ones((2, 2)), 90.0, 0)]
    state = encode_batch(records)
    assert np.array_equal(state.t, [0, 0])
    assert np.array_equal(state.z_sex, one_hot([1, 0], 2))
    decoded = decode_state(state)
    assert [r.age for r in decoded] == [55.0, 90.0]
    assert [r.sex for r in decoded] == [1, 0]
    assert np.array_equal(decoded[1].image, np.ones((2, 2)))


def test_soft_sex_decodes_by_argmax():
    state = JointState(np.zeros((1, 2, 2)), np.zeros(1), np.array([[0.4, 0.6]]), np.zeros(1))
    assert decode_state(state)[0].sex == 1


def test_zero_noise_diffusion_keeps_state(rng):
    schedules = Schedules(GaussianSchedule.from_betas([0.0, 0.0]), DiscreteSchedule.from_betas([0.0, 0.0], 2))
    z0 = encode_batch(_records(5))
    zt, _, _ = forward_diffuse(z0, 2, rng, schedules)
    assert np.array_equal(zt.z_image, z0.z_image)
    assert np.array_equal(zt.z_age, z0.z_age)
    assert np.array_equal(zt.z_sex, z0.z_sex)
    assert np.array_equal(zt.t, [2] * 5)


def test_diffusion_marginals(rng, small_schedules):
    n = 20_000
    record = PatientRecord(np.full((2, 2), 0.5), 72.5, 0)
    z0 = encode_batch([record] * n)
    t = 12
    zt, _, _ = forward_diffuse(z0, t, rng, small_schedules)
    ab = small_schedules.gaussian.alpha_bars[t]
    pixel = zt.z_image[:, 0, 0]
    assert abs(pixel.mean() - np.sqrt(ab) * 0.5) < 3 * np.sqrt((1 - ab) / n)
    assert pixel.var() == pytest.approx(1 - ab, rel=0.05)
    p0 = small_schedules.discrete.Q_bar[t][0, 0]
    assert abs(zt.z_sex[:, 0].mean() - p0) < 3 * np.sqrt(p0 * (1 - p0) / n)


def test_diffusion_rejects_step_zero(rng, small_schedules):
    with pytest.raises(ValueError):
        forward_diffuse(encode_batch(_records(2)), 0, rng, small_schedules)


def _outputs(eps_image, eps_age, logits):
    return DenoiserOutput(ag.constant(eps_image), ag.constant(eps_age), ag.constant(logits))


def test_perfect_predictions_give_near_zero_loss(rng):
    eps_image = rng.standard_normal((4, 3, 3))
    eps_age = rng.standard_normal(4)
    target = one_hot([0, 1, 1, 0], 2)
    loss = combine_loss(_outputs(eps_image, eps_age, 40.0 * (2 * target - 1)), eps_image, eps_age, target)
    assert loss.total.item() < 1e-6


def test_zero_predictor_loss(rng):
    B = 2000
    eps_image = rng.standard_normal((B, 4, 4))
    eps_age = rng.standard_normal(B)
    target = one_hot(rng.integers(0, 2, B), 2)
    loss = combine_loss(_outputs(np.zeros((B, 4, 4)), np.zeros(B), np.zeros((B, 2))), eps_image, eps_age, target)
    assert loss.image == pytest.approx(1.0, abs=0.05)
    assert loss.age == pytest.approx(1.0, abs=0.15)
    assert loss.sex == pytest.approx(np.log(2))
    assert loss.total.item() == pytest.approx(loss.image + loss.age + loss.sex)


def test_loss_terms_are_weighted_and_non_negative(rng):
    eps_image = rng.standard_normal((3, 2, 2))
    eps_age = rng.standard_normal(3)
    target = one_hot([1, 0, 1], 2)
    outputs = _outputs(rng.standard_normal((3, 2, 2)), rng.standard_normal(3), rng.standard_normal((3, 2)))
    loss = combine_loss(outputs, eps_image, eps_age, target, image_weight=2.5)
    assert min(loss.image, loss.age, loss.sex) >= 0
    assert loss.total.item() == pytest.approx(2.5 * loss.image + loss.age + loss.sex)


def test_loss_shape_mismatch_raises(rng):
    outputs = _outputs(np.zeros((2, 2, 2)), np.zeros(2), np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        combine_loss(outputs, np.zeros((2, 3, 3)), np.zeros(2), one_hot([0, 1], 2))


def test_fresh_network_loss_equals_zero_predictor(tiny_config, small_schedules):
    rng = np.random.default_rng(4)
    z0 = encode_batch(_records(6, side=8, rng=rng))
    batch = make_batch(z0, np.random.default_rng(1), np.random.default_rng(2), small_schedules)
    params = init_params(tiny_config, np.random.default_rng(3))
    loss = joint_loss(batch, params, tiny_config)
    zero = combine_loss(
        _outputs(np.zeros((6, 8, 8)), np.zeros(6), np.zeros((6, 2))),
        batch.eps_image, batch.eps_age, z0.z_sex,
    )
    assert loss.total.item() == pytest.approx(zero.total.item(), rel=1e-12)
    assert loss.sex == pytest.approx(np.log(2))


def test_joint_loss_requires_clean_and_noisy_states(tiny_config, small_schedules):
    z0 = encode_batch(_records(2, side=8))
    batch = make_batch(z0, np.random.default_rng(1), np.random.default_rng(2), small_schedules)
    params = init_params(tiny_config, np.random.default_rng(3))
    with pytest.raises(ValueError):
        joint_loss(TrainingBatch(batch.zt, batch.zt, batch.eps_image, batch.eps_age), params, tiny_config)


@pytest.mark.parametrize("age,expected", [(20.0, -1.0), (55.0, 0.0), (90.0, 1.0)])
def test_encode_record(age, expected):
    image = np.linspace(-1.0, 1.0, 16).reshape(4, 4)
    state = encode_record(PatientRecord(image, age, 1), (20.0, 90.0))
    assert state.batch_size == 1
    assert state.z_age[0] == pytest.approx(expected)
    assert np.array_equal(state.z_sex[0], [0.0, 1.0])
    assert np.array_equal(state.z_image[0], image)
    assert state.t[0] == 0


def test_encode_record_rejects_age_outside_range():
    with pytest.raises(ValueError):
        encode_record(PatientRecord(np.zeros((4, 4)), 95.0, 0), (20.0, 90.0))
