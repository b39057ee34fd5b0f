import numpy as np
import pytest

from app.errors import DataError
from app.evaluation.baselines import knn_impute, mean_impute
from app.models.dataset import Dataset, Split, stratified_split
from app.models.schemas import KnnConfig
from conftest import make_dataset


def test_knn_with_whole_group_equals_group_mean(rng):
    dataset = make_dataset(rng, n_per_group=(6, 4, 5))
    split = stratified_split(dataset, rng=np.random.default_rng(0))
    knn = knn_impute(dataset, split, KnnConfig(neighbor_count=50))
    mean = mean_impute(dataset, split)
    np.testing.assert_array_equal(knn.values, mean.values)


def test_knn_matches_brute_force(rng):
    dataset = make_dataset(rng, n_per_group=(12, 9), d=2)
    config = KnnConfig(neighbor_count=3, standardize_inputs=False)
    imputed = knn_impute(dataset, None, config).values
    x, y = dataset.covariates, dataset.factual_outcome
    for i in range(dataset.n):
        for t in range(dataset.k):
            members = np.flatnonzero(dataset.group == t)
            distances = np.sqrt(((x[members] - x[i]) ** 2).sum(axis=1))
            nearest = members[np.argsort(distances, kind="stable")[:3]]
            assert imputed[i, t] == pytest.approx(y[nearest].mean(), rel=1e-12)


def test_knn_ties_prefer_lower_index():
    x = np.array([[0.0], [1.0], [-1.0], [5.0]])
    dataset = Dataset(
        covariates=x,
        group=np.array([0, 0, 0, 1]),
        factual_outcome=np.array([10.0, 1.0, 2.0, 7.0]),
        group_count=2,
    )
    imputed = knn_impute(dataset, None, KnnConfig(neighbor_count=2, standardize_inputs=False))
    # 单元 0 的两个距离为 1 的邻居并列，取下标较小的单元 1
    assert imputed.values[0, 0] == pytest.approx(5.5)
    assert imputed.values[3, 1] == 7.0


def test_knn_only_uses_training_units(rng):
    dataset = make_dataset(rng, n_per_group=(10, 10))
    split = stratified_split(dataset, rng=np.random.default_rng(2))
    imputed = knn_impute(dataset, split, KnnConfig(neighbor_count=1)).values
    for t in range(2):
        train_outcomes = dataset.factual_outcome[split.train[dataset.group[split.train] == t]]
        assert np.isin(imputed[:, t], train_outcomes).all()


def test_group_without_training_units_fails(rng):
    dataset = make_dataset(rng, n_per_group=(10, 10))
    split = stratified_split(dataset, rng=np.random.default_rng(2))
    split = Split(
        train=split.train[dataset.group[split.train] == 0],
        validation=split.validation,
        test=np.sort(np.concatenate([split.test, split.train[dataset.group[split.train] == 1]])),
    )
    with pytest.raises(DataError):
        mean_impute(dataset, split)
