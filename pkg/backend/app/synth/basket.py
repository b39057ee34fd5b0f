import logging
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
import pandas as pd
from numpy.typing import NDArray

from app.models.dataset import Dataset
from app.models.schemas import SynthConfig
from app.synth.correlation import assemble_correlation, gaussian_kl, sample_mvn, symmetric_kl

logger = logging.getLogger(__name__)

KL_COLUMNS = ["group_from", "group_to", "kl", "symmetric_kl"]


@dataclass(frozen=True)
class SyntheticDataset:
    """合成篮子试验数据：数据集、各组结果权重、实际相关矩阵与 KL 表"""

    dataset: Dataset
    outcome_weights: List[NDArray[np.float64]]
    correlation: NDArray[np.float64]
    kl_table: pd.DataFrame


def basket_outcomes(
    x: NDArray[np.float64],
    weights: Sequence[NDArray[np.float64]],
    block_dims: Sequence[int]
) -> NDArray[np.float64]:
    """
    第 k 列潜在结果 y_k = cos((w_kᵀ x_k)²)，x_k 为第 k 个块的坐标

    Args:
        x: n × d 协变量
        weights: 每组的结果权重 w_k（长度 d_k）
        block_dims: 各块维度

    Returns:
        n × K 潜在结果矩阵
    """
    offsets = np.concatenate([[0], np.cumsum(block_dims)])
    columns = [
        np.cos((x[:, offsets[k]:offsets[k + 1]] @ w) ** 2)
        for k, w in enumerate(weights)
    ]
    return np.column_stack(columns) if columns else np.empty((x.shape[0], 0))


def kl_table(config: SynthConfig, correlation: NDArray[np.float64]) -> pd.DataFrame:
    """所有组对 (j, k), j < k 的 KL(N_k‖N_j) 与对称 KL"""
    rows = []
    means = [np.asarray(m, dtype=np.float64) for m in config.mean_shifts]
    for j in range(config.group_count):
        for k in range(j + 1, config.group_count):
            rows.append({
                "group_from": k,
                "group_to": j,
                "kl": gaussian_kl(means[k], correlation, means[j], correlation),
                "symmetric_kl": symmetric_kl(means[k], correlation, means[j], correlation),
            })
    return pd.DataFrame(rows, columns=KL_COLUMNS)


def generate_basket_dataset(config: SynthConfig) -> SyntheticDataset:
    """
    生成合成篮子试验数据

    每组从 N(μ_k, R) 抽取 n_k 个单元，对每个单元计算全部 K 个潜在结果，
    事实结果取与其所属组对应的列。结果权重由 outcome_seed 决定，协变量由 covariate_seed 决定。

    Args:
        config: 合成配置

    Returns:
        SyntheticDataset
    """
    spec = config.spec
    correlation = assemble_correlation(spec)

    weight_rng = np.random.default_rng(config.outcome_seed)
    weights = [weight_rng.uniform(-1.0, 1.0, size=d_k) for d_k in spec.block_dims]

    covariate_rng = np.random.default_rng(config.covariate_seed)
    parts = [
        sample_mvn(np.asarray(config.mean_shifts[k]), correlation, n_k, covariate_rng)
        for k, n_k in enumerate(config.units_per_group)
    ]
    x = np.vstack(parts)
    group = np.repeat(np.arange(config.group_count), config.units_per_group)
    potential = basket_outcomes(x, weights, spec.block_dims)
    factual = potential[np.arange(x.shape[0]), group]

    table = kl_table(config, correlation)
    for row in table.itertuples(index=False):
        logger.info(
            f"组 {row.group_from} 相对组 {row.group_to}: KL={row.kl:.4f}，对称 KL={row.symmetric_kl:.4f}"
        )

    dataset = Dataset(
        covariates=x,
        group=group,
        factual_outcome=factual,
        group_count=config.group_count,
        potential_outcomes=potential,
        feature_names=tuple(f"x{j + 1}" for j in range(spec.dim)),
        group_labels=tuple(str(k) for k in range(config.group_count)),
        name=f"basket-K{config.group_count}",
    )
    return SyntheticDataset(dataset=dataset, outcome_weights=weights, correlation=correlation, kl_table=table)
