"""生成器与判别器：结构、前向计算与损失的手工核对"""

import numpy as np
import pytest

from app.errors import ArgumentError, ConfigError, ShapeError
from app.models.dataset import Batch
from app.mtal.discriminator import (
    balanced_accuracy,
    build_discriminator,
    discriminator_loss,
    judge,
    judge_batch,
    width_schedule,
)
from app.mtal.generator import (
    build_generator,
    forward_all,
    generator_factual_loss,
    generator_loss_and_grads,
    predict_potential_outcomes,
)
from conftest import make_batch


def _randomize(params, rng):
    for array in params.values():
        array[...] = rng.normal(0.0, 0.5, size=array.shape)


def test_generator_has_one_head_per_group(rng):
    gen = build_generator(5, 3, 2, 8, 0.0, 0.0, rng)
    assert gen.group_count == 3 and gen.input_dim == 5
    predicted = predict_potential_outcomes(gen, rng.normal(size=(7, 5)))
    assert predicted.shape == (7, 3)


def test_generator_heads_are_independent(rng):
    gen = build_generator(4, 3, 2, 6, 0.0, 0.0, rng)
    x = rng.normal(size=(10, 4))
    before, _ = forward_all(gen, x)
    gen.heads[1].output.bias += 5.0
    after, _ = forward_all(gen, x)
    np.testing.assert_array_equal(before[:, [0, 2]], after[:, [0, 2]])
    np.testing.assert_allclose(after[:, 1] - before[:, 1], 5.0)


def test_generator_without_feature_selection(rng):
    gen = build_generator(4, 2, 3, 5, 0.0, 0.0, rng, feature_selection=False)
    assert all(head.selection is None for head in gen.heads)
    assert not any(name.endswith("selection") for name in gen.parameters())
    assert gen.input_dim == 4


def test_generator_rejects_wrong_input_width(rng):
    gen = build_generator(4, 2, 2, 5, 0.0, 0.0, rng)
    with pytest.raises(ShapeError):
        predict_potential_outcomes(gen, np.ones((3, 5)))
    with pytest.raises(ConfigError):
        build_generator(4, 2, 2, 5, -1.0, 0.0, rng)


def test_generator_loss_is_factual_mse_plus_penalty(rng):
    gen = build_generator(3, 2, 2, 4, 0.01, 0.02, rng)
    batch = make_batch(rng, d=3, k=2, m=4)
    yhat = predict_potential_outcomes(gen, batch.covariates).values
    mse = np.mean((yhat[np.arange(batch.size), batch.group] - batch.outcome) ** 2)
    penalty = sum(
        0.01 * np.sum(w ** 2) + 0.02 * np.sum(np.abs(w)) for w in gen.penalized_parameters().values()
    )
    assert generator_factual_loss(gen, batch) == pytest.approx(mse + penalty, rel=1e-12)


def test_penalty_excludes_biases_and_output_layer(rng):
    gen = build_generator(3, 2, 2, 4, 0.01, 0.0, rng)
    names = set(gen.penalized_parameters())
    assert "head0.selection" in names and "head1.rep1.weights" in names
    assert not any(".bias" in name or ".out." in name for name in names)


def test_dropout_only_in_training_mode(rng):
    gen = build_generator(3, 2, 2, 16, 0.0, 0.0, rng, dropout_rate=0.5)
    x = rng.normal(size=(6, 3))
    first = predict_potential_outcomes(gen, x).values
    second = predict_potential_outcomes(gen, x).values
    np.testing.assert_array_equal(first, second)
    noisy = predict_potential_outcomes(gen, x, training=True, rng=np.random.default_rng(1)).values
    assert not np.allclose(noisy, first)


def test_width_schedule_halves_and_must_decrease():
    assert width_schedule(100, 3) == [100, 50, 25]
    assert width_schedule(5, 2) == [5, 2]
    with pytest.raises(ConfigError):
        width_schedule(3, 3)
    with pytest.raises(ConfigError):
        width_schedule(100, 1)


def test_discriminator_sees_outcome_at_every_layer(rng):
    disc = build_discriminator(4, 3, 3, 8, 0.0, 0.0, rng)
    head = disc.heads[0]
    assert [layer.in_dim for layer in head.layers] == [5, 9, 5]
    assert head.output.in_dim == 3
    assert disc.input_dim == 4


def test_judge_returns_probability_and_depends_on_candidate(rng):
    disc = build_discriminator(3, 2, 2, 6, 0.0, 0.0, rng)
    _randomize(disc.parameters(), rng)
    x = rng.normal(size=3)
    low = judge(disc, x, 1, -3.0)
    high = judge(disc, x, 1, 3.0)
    assert 0.0 < low < 1.0 and 0.0 < high < 1.0
    assert low != high
    with pytest.raises(ArgumentError):
        judge(disc, x, 2, 0.0)
    with pytest.raises(ShapeError):
        judge(disc, np.ones(4), 0, 0.0)


def test_class_weights():
    rng = np.random.default_rng(0)
    disc = build_discriminator(2, 4, 2, 4, 0.0, 0.0, rng)
    assert disc.class_weights == (0.75, 0.25)


def test_discriminator_loss_matches_hand_computation():
    """k=4, m=2：8 个事实项与 24 个反事实项逐一用 judge 计算"""
    rng = np.random.default_rng(7)
    d, k, m = 3, 4, 2
    gen = build_generator(d, k, 2, 5, 0.0, 0.0, rng)
    disc = build_discriminator(d, k, 2, 6, 0.0, 0.0, rng)
    _randomize(gen.parameters(), rng)
    _randomize(disc.parameters(), rng)
    batch = make_batch(rng, d, k, m)
    yhat = predict_potential_outcomes(gen, batch.covariates).values

    factual_terms, counterfactual_terms = [], []
    for t in range(k):
        for i in range(batch.size):
            if batch.group[i] == t:
                p = judge(disc, batch.covariates[i], t, batch.outcome[i])
                factual_terms.append(np.log(p))
            else:
                p = judge(disc, batch.covariates[i], t, yhat[i, t])
                counterfactual_terms.append(np.log(1.0 - p))
    assert len(factual_terms) == 8 and len(counterfactual_terms) == 24

    w0, w1 = 3 / 4, 1 / 4
    expected = -(w0 * sum(factual_terms) + w1 * sum(counterfactual_terms)) / (m * k * k)
    assert discriminator_loss(disc, gen, batch) == pytest.approx(expected, abs=1e-10)


def test_judge_batch_requires_balanced_batch(rng):
    gen = build_generator(2, 2, 2, 4, 0.0, 0.0, rng)
    disc = build_discriminator(2, 2, 2, 4, 0.0, 0.0, rng)
    batch = make_batch(rng, d=2, k=2, m=3)
    unbalanced = Batch(
        covariates=batch.covariates[:5], group=batch.group[:5], outcome=batch.outcome[:5], group_count=2
    )
    yhat = predict_potential_outcomes(gen, unbalanced.covariates).values
    with pytest.raises(ArgumentError):
        judge_batch(disc, unbalanced, yhat)


def test_balanced_accuracy_of_uninformed_discriminator(rng):
    gen = build_generator(2, 3, 2, 4, 0.0, 0.0, rng)
    disc = build_discriminator(2, 3, 2, 4, 0.0, 0.0, rng)
    for head in disc.heads:
        head.output.weights[...] = 0.0
        head.output.bias[...] = 0.0
    batch = make_batch(rng, d=2, k=3, m=2)
    yhat = predict_potential_outcomes(gen, batch.covariates).values
    result = judge_batch(disc, batch, yhat)
    # p = 0.5 处不判为事实，召回 0、特异度 1
    assert balanced_accuracy(result) == pytest.approx(0.5)


def test_head_gradient_ignores_units_of_other_groups(rng):
    gen = build_generator(3, 2, 2, 5, 0.0, 0.0, rng)
    _randomize(gen.parameters(), rng)
    x = rng.normal(size=(6, 3))
    group = np.array([0, 0, 0, 1, 1, 1])
    outcome = rng.normal(size=6)

    only_first = Batch(covariates=x, group=np.zeros(6, dtype=np.int64), outcome=outcome, group_count=2)
    _, grads = generator_loss_and_grads(gen, only_first)
    for name, grad in grads.items():
        if name.startswith("head1."):
            np.testing.assert_array_equal(grad, 0.0)
    assert any(np.any(grad != 0.0) for name, grad in grads.items() if name.startswith("head0."))

    mixed = Batch(covariates=x, group=group, outcome=outcome, group_count=2)
    shifted = Batch(covariates=x, group=group, outcome=outcome + 10.0 * (group == 1), group_count=2)
    _, before = generator_loss_and_grads(gen, mixed)
    _, after = generator_loss_and_grads(gen, shifted)
    for name in before:
        if name.startswith("head0."):
            np.testing.assert_array_equal(before[name], after[name])


def test_judge_is_one_half_at_zero_weights_and_rises_with_output_bias(rng):
    disc = build_discriminator(3, 2, 2, 6, 0.0, 0.0, rng)
    for array in disc.parameters().values():
        array[...] = 0.0
    x = rng.normal(size=3)
    assert judge(disc, x, 0, 1.7) == 0.5
    probabilities = []
    for bias in (-2.0, 0.0, 2.0, 20.0):
        disc.heads[0].output.bias[...] = bias
        probabilities.append(judge(disc, x, 0, 1.7))
    assert all(a < b for a, b in zip(probabilities, probabilities[1:]))
    assert probabilities[-1] > 0.999
    # 其他头不受影响
    assert judge(disc, x, 1, 1.7) == 0.5
