from dataclasses import replace

import numpy as np
import pytest

from app.errors import ArgumentError, DatasetValidationError
from app.models.dataset import (
    Batch,
    Dataset,
    ImputedOutcomes,
    STD_FLOOR,
    Scaler,
    Split,
    factual_matrix,
    standardize,
    stratified_split,
    validate,
)
from conftest import make_dataset


def test_dataset_arrays_are_read_only(toy_dataset):
    with pytest.raises(ValueError):
        toy_dataset.covariates[0, 0] = 1.0
    assert toy_dataset.n == 21 and toy_dataset.d == 3 and toy_dataset.k == 3
    assert toy_dataset.group_sizes().tolist() == [8, 6, 7]


def test_validate_reports_the_offending_field(toy_dataset):
    bad_group = replace(toy_dataset, group=np.where(toy_dataset.group == 2, 3, toy_dataset.group))
    with pytest.raises(DatasetValidationError) as info:
        validate(bad_group)
    assert info.value.field == "group"

    x = toy_dataset.covariates.copy()
    x[4, 1] = np.nan
    with pytest.raises(DatasetValidationError, match="covariates"):
        validate(replace(toy_dataset, covariates=x))


def test_validate_checks_consistency_with_potential_outcomes(toy_dataset):
    y = toy_dataset.factual_outcome.copy()
    y[3] += 1.0
    with pytest.raises(DatasetValidationError) as info:
        validate(replace(toy_dataset, factual_outcome=y))
    assert info.value.field == "potential_outcomes"
    assert "第 3 行" in str(info.value)


def test_validate_warns_on_small_groups(rng):
    dataset = make_dataset(rng, n_per_group=(10, 2))
    report = validate(dataset)
    assert report.group_sizes == [10, 2]
    assert len(report.warnings) == 1 and "第 1 组" in report.warnings[0]


def test_stratified_split_is_disjoint_and_per_group(rng):
    dataset = make_dataset(rng, n_per_group=(20, 10, 30))
    split = stratified_split(dataset, (0.6, 0.2, 0.2), np.random.default_rng(3))
    split.check(dataset.n)
    for t, size in enumerate((20, 10, 30)):
        assert np.sum(dataset.group[split.train] == t) == round(0.6 * size)
        assert np.sum(dataset.group[split.validation] == t) == round(0.2 * size)
    assert np.all(np.diff(split.train) > 0)
    np.testing.assert_array_equal(split.subset("all"), np.arange(dataset.n))


def test_stratified_split_keeps_tiny_groups_in_training(rng):
    dataset = make_dataset(rng, n_per_group=(12, 2))
    split = stratified_split(dataset, (0.5, 0.25, 0.25), np.random.default_rng(0))
    assert np.sum(dataset.group[split.train] == 1) == 2


def test_stratified_split_rejects_bad_fractions(toy_dataset):
    with pytest.raises(ArgumentError):
        stratified_split(toy_dataset, (0.5, 0.5, 0.5))


def test_split_check_detects_overlap():
    split = Split(train=np.array([0, 1]), validation=np.array([1]), test=np.array([2]))
    with pytest.raises(DatasetValidationError):
        split.check(4)


def test_standardize_uses_training_statistics(rng):
    dataset = make_dataset(rng, n_per_group=(30, 30))
    split = stratified_split(dataset, rng=np.random.default_rng(1))
    scaled, scaler = standardize(dataset, split)
    np.testing.assert_allclose(scaled.covariates[split.train].mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(scaled.factual_outcome[split.train].std(), 1.0)
    restored = scaler.invert(scaled)
    np.testing.assert_allclose(restored.covariates, dataset.covariates)
    np.testing.assert_allclose(restored.potential_outcomes, dataset.potential_outcomes)


def test_scaler_dict_round_trip_and_constant_column(rng):
    dataset = make_dataset(rng, n_per_group=(10, 10))
    x = dataset.covariates.copy()
    x[:, 0] = 4.0
    dataset = replace(dataset, covariates=x)
    split = stratified_split(dataset, rng=np.random.default_rng(0))
    scaled, scaler = standardize(dataset, split)
    assert np.all(np.isfinite(scaled.covariates))
    assert scaler.x_std[0] == STD_FLOOR
    np.testing.assert_array_equal(scaled.covariates[:, 0], 0.0)
    restored = Scaler.from_dict(scaler.to_dict())
    np.testing.assert_array_equal(restored.x_std, scaler.x_std)
    assert restored.y_mean == scaler.y_mean


def test_batch_units_per_group(rng, toy_dataset):
    balanced = Batch.from_dataset(toy_dataset, [0, 1, 8, 9, 14, 15])
    assert balanced.units_per_group() == 2
    with pytest.raises(ArgumentError):
        Batch.from_dataset(toy_dataset, [0, 1, 8, 14]).units_per_group()


def test_factual_matrix_and_imputed_outcomes(toy_dataset):
    matrix = factual_matrix(toy_dataset)
    assert np.sum(np.isfinite(matrix)) == toy_dataset.n
    rows = np.arange(toy_dataset.n)
    np.testing.assert_array_equal(matrix[rows, toy_dataset.group], toy_dataset.factual_outcome)

    imputed = ImputedOutcomes(values=toy_dataset.potential_outcomes)
    np.testing.assert_array_equal(imputed.factual(toy_dataset.group), toy_dataset.factual_outcome)


def test_subset_keeps_truth_aligned(toy_dataset):
    part = toy_dataset.subset([2, 10, 20])
    assert isinstance(part, Dataset)
    np.testing.assert_array_equal(part.potential_outcomes, toy_dataset.potential_outcomes[[2, 10, 20]])
    assert part.group.tolist() == [0, 1, 2]
