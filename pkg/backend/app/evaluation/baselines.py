import logging
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist

from app.errors import DataError
from app.models.dataset import Dataset, ImputedOutcomes, Split, STD_FLOOR
from app.models.schemas import KnnConfig

logger = logging.getLogger(__name__)


def _train_members(dataset: Dataset, split: Optional[Split], t: int) -> np.ndarray:
    pool = np.arange(dataset.n) if split is None else split.train
    members = np.sort(pool[dataset.group[pool] == t])
    if members.size == 0:
        raise DataError(f"第 {t} 组在训练集中没有样本")
    return members


def knn_impute(dataset: Dataset, split: Optional[Split], config: KnnConfig) -> ImputedOutcomes:
    """
    k 近邻反事实推断：单元格 (i, t) 为第 t 组中与 x_i 最近的 neighbor_count 个训练单元的平均事实结果

    Args:
        dataset: 数据集
        split: 划分，只用训练集单元作为近邻；为空时使用全部单元
        config: 近邻配置

    Returns:
        n × k 推断矩阵（事实单元格同样按近邻推断）
    """
    x = dataset.covariates
    pool = np.arange(dataset.n) if split is None else split.train
    if config.standardize_inputs:
        mean = x[pool].mean(axis=0)
        std = np.maximum(x[pool].std(axis=0), STD_FLOOR)
        x = (x - mean) / std

    result = np.empty((dataset.n, dataset.group_count))
    for t in range(dataset.group_count):
        members = _train_members(dataset, split, t)
        count = config.neighbor_count
        if members.size < count:
            logger.warning(f"第 {t} 组只有 {members.size} 个训练样本，少于 k={count}，使用全部样本")
            count = members.size
        outcomes = dataset.factual_outcome[members]
        distances = cdist(x, x[members], metric="euclidean")
        # 稳定排序：距离相同时取下标较小的单元
        order = np.argsort(distances, axis=1, kind="stable")[:, :count]
        for i in range(dataset.n):
            chosen = np.sort(order[i])
            result[i, t] = np.mean(outcomes[chosen])
    return ImputedOutcomes(values=result)


def mean_impute(dataset: Dataset, split: Optional[Split]) -> ImputedOutcomes:
    """单元格 (i, t) 为第 t 组训练样本的平均结果"""
    result = np.empty((dataset.n, dataset.group_count))
    for t in range(dataset.group_count):
        members = _train_members(dataset, split, t)
        result[:, t] = np.mean(dataset.factual_outcome[members])
    return ImputedOutcomes(values=result)
