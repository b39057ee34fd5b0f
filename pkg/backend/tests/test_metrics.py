import math
from dataclasses import replace

import numpy as np
import pytest
from pydantic import ValidationError

from app.errors import ArgumentError, DataError, ShapeError
from app.evaluation.metrics import (
    ate_error,
    mse_potential,
    multi_metric,
    pehe,
    reports_to_frame,
    summarize_reports,
    tgor,
    tgor_borrowed,
)
from app.models.dataset import Dataset, ImputedOutcomes, factual_matrix
from app.models.schemas import MetricsReport

TRUE_PO = np.array([[1.0, 3.0], [2.0, 2.0], [0.0, 4.0]])
EST_PO = np.array([[1.0, 2.0], [2.0, 3.0], [1.0, 4.0]])


def test_pehe_and_ate_on_small_example():
    value, root = pehe(TRUE_PO, EST_PO)
    assert value == pytest.approx(1.0)
    assert root == pytest.approx(1.0)
    assert ate_error(TRUE_PO, EST_PO) == pytest.approx(1.0 / 3.0)
    assert pehe(TRUE_PO, TRUE_PO) == (0.0, 0.0)


def test_metrics_accept_imputed_outcomes():
    assert pehe(TRUE_PO, ImputedOutcomes(values=EST_PO))[0] == pytest.approx(1.0)


def test_multi_metric_reduces_exactly_to_binary_for_two_groups(rng):
    true_po = rng.normal(size=(50, 2))
    est_po = rng.normal(size=(50, 2))
    assert multi_metric(true_po, est_po, "pehe") == pehe(true_po, est_po)[0]
    assert multi_metric(true_po, est_po, "ate") == ate_error(true_po, est_po)


def test_multi_metric_averages_all_pairs(rng):
    true_po = rng.normal(size=(20, 3))
    est_po = rng.normal(size=(20, 3))
    pairs = [(0, 1), (0, 2), (1, 2)]
    expected = np.mean([pehe(true_po[:, list(p)], est_po[:, list(p)])[0] for p in pairs])
    assert multi_metric(true_po, est_po, "pehe") == pytest.approx(expected, rel=1e-14)


def test_metric_argument_checks():
    with pytest.raises(ShapeError):
        pehe(TRUE_PO, EST_PO[:2])
    with pytest.raises(ShapeError):
        pehe(np.ones((3, 3)), np.ones((3, 3)))
    with pytest.raises(ArgumentError):
        multi_metric(np.ones((3, 1)), np.ones((3, 1)), "pehe")


def test_mse_potential():
    assert mse_potential(TRUE_PO, EST_PO) == pytest.approx(3.0 / 6.0)


def _trial() -> Dataset:
    potential = np.array([
        [0.2, 0.9],
        [0.6, 0.1],
        [0.4, 0.8],
        [0.7, 0.3],
    ])
    group = np.array([0, 0, 1, 1])
    return Dataset(
        covariates=np.zeros((4, 1)),
        group=group,
        factual_outcome=potential[np.arange(4), group],
        group_count=2,
        potential_outcomes=potential,
    )


def test_tgor_mutation_and_tumor_type():
    dataset = _trial()
    matrix = dataset.potential_outcomes
    assert tgor(matrix, dataset, "mutation") == pytest.approx(4.0 / 8.0)
    assert tgor(matrix, dataset, 0) == pytest.approx(0.4)
    assert tgor(matrix, dataset, 1) == pytest.approx(0.55)
    assert tgor_borrowed(matrix, 1) == pytest.approx(0.525)


def test_tgor_with_response_threshold():
    dataset = _trial()
    matrix = dataset.potential_outcomes
    assert tgor(matrix, dataset, "mutation", response_threshold=0.5) == pytest.approx(4.0 / 8.0)
    assert tgor(matrix, dataset, 0, response_threshold=0.5) == pytest.approx(0.5)
    assert tgor(matrix, dataset, 1, response_threshold=0.85) == pytest.approx(0.0)


def test_tgor_mutation_requires_complete_matrix():
    dataset = _trial()
    with pytest.raises(DataError, match="推断反事实"):
        tgor(factual_matrix(dataset), dataset, "mutation")
    # 单组缓解率只用事实结果
    assert tgor(factual_matrix(dataset), dataset, 1) == pytest.approx(0.55)


def test_tgor_empty_group():
    dataset = replace(_trial(), group_count=3, potential_outcomes=None)
    matrix = np.zeros((4, 3))
    with pytest.raises(DataError, match="n_c = 0"):
        tgor(matrix, dataset, 2)


def _report(replicate, pehe_value):
    return MetricsReport(
        dataset_id="ihdp", model_id="mtal", replicate=replicate, seed=0,
        metrics={"pehe": pehe_value, "ate": 0.1},
    )


def test_reports_flatten_and_summarize():
    reports = [_report(0, 1.0), _report(1, 3.0)]
    frame = reports_to_frame(reports)
    assert frame.shape == (4, 6)
    assert frame["metric"].tolist() == ["pehe", "ate", "pehe", "ate"]
    summary = summarize_reports(reports)
    row = summary[summary["metric"] == "pehe"].iloc[0]
    assert row["mean"] == pytest.approx(2.0)
    assert row["std"] == pytest.approx(math.sqrt(2.0))
    assert row["count"] == 2
    single = summarize_reports([_report(0, 1.0)])
    assert single["std"].tolist() == [0.0, 0.0]
    assert summarize_reports([]).empty


def test_report_rejects_invalid_values():
    with pytest.raises(ValidationError):
        _report(0, -1.0)
    with pytest.raises(ValidationError):
        _report(0, float("nan"))
