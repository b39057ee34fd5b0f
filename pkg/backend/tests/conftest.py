import sys
from pathlib import Path

import numpy as np
import pytest

backend_dir = Path(__file__).parent.parent
if str(backend_dir) not in sys.path:
    sys.path.insert(0, str(backend_dir))

from app.models.dataset import Batch, Dataset  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def make_dataset(rng, n_per_group=(8, 6, 7), d=3, with_truth=True, name="toy") -> Dataset:
    """小型多组数据集，潜在结果为协变量的线性函数"""
    k = len(n_per_group)
    group = np.repeat(np.arange(k), n_per_group)
    x = rng.normal(size=(group.size, d))
    coef = rng.normal(size=(d, k))
    potential = x @ coef + np.arange(k)
    factual = potential[np.arange(group.size), group]
    return Dataset(
        covariates=x,
        group=group,
        factual_outcome=factual,
        group_count=k,
        potential_outcomes=potential if with_truth else None,
        name=name,
    )


def make_batch(rng, d: int, k: int, m: int) -> Batch:
    return Batch(
        covariates=rng.normal(size=(k * m, d)),
        group=np.repeat(np.arange(k), m),
        outcome=rng.normal(size=k * m),
        group_count=k,
    )


@pytest.fixture
def toy_dataset(rng):
    return make_dataset(rng)
