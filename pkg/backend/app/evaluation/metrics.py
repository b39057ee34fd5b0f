"""评估指标：PEHE/ATE 系列、潜在结果 MSE 与 TGOR"""

import itertools
import math
from typing import Iterable, Literal, Optional, Tuple, Union

import numpy as np
import pandas as pd
from numpy.typing import NDArray

from app.errors import ArgumentError, DataError, ShapeError
from app.models.dataset import Dataset, ImputedOutcomes
from app.models.schemas import MetricsReport

Matrix = Union[NDArray[np.float64], ImputedOutcomes]


def _matrix(values: Matrix, name: str) -> NDArray[np.float64]:
    if isinstance(values, ImputedOutcomes):
        return values.values
    array = np.asarray(values, dtype=np.float64)
    if array.ndim != 2:
        raise ShapeError(f"{name} 必须是二维矩阵，实际维度 {array.ndim}")
    return array


def _pair(true_po: Matrix, est_po: Matrix, columns: Optional[int] = 2):
    true_m = _matrix(true_po, "true_po")
    est_m = _matrix(est_po, "est_po")
    if true_m.shape != est_m.shape:
        raise ShapeError(f"真值形状 {true_m.shape} 与估计形状 {est_m.shape} 不一致")
    if columns is not None and true_m.shape[1] != columns:
        raise ShapeError(f"需要 {columns} 列，实际 {true_m.shape[1]} 列")
    if true_m.shape[0] == 0:
        raise ShapeError("矩阵没有行")
    return true_m, est_m


def pehe(true_po: Matrix, est_po: Matrix) -> Tuple[float, float]:
    """
    ε_PEHE = mean((ITE - ITÊ)²)，ITE 为第 1 列减第 0 列

    Returns:
        (ε_PEHE, √ε_PEHE)
    """
    true_m, est_m = _pair(true_po, est_po)
    ite = true_m[:, 1] - true_m[:, 0]
    ite_hat = est_m[:, 1] - est_m[:, 0]
    value = float(np.mean((ite - ite_hat) ** 2))
    return value, math.sqrt(value)


def ate_error(true_po: Matrix, est_po: Matrix) -> float:
    """ε_ATE = |mean(ITE) - mean(ITÊ)|"""
    true_m, est_m = _pair(true_po, est_po)
    ate = float(np.mean(true_m[:, 1] - true_m[:, 0]))
    ate_hat = float(np.mean(est_m[:, 1] - est_m[:, 0]))
    return abs(ate - ate_hat)


def multi_metric(true_po: Matrix, est_po: Matrix, which: Literal["pehe", "ate"]) -> float:
    """
    多处理扩展：对全部 C(k,2) 个无序处理对 (t, j), t > j 的二元指标取平均

    Args:
        true_po: n × k 真实潜在结果
        est_po: n × k 估计潜在结果
        which: "pehe"（返回 ε_mPEHE，未开方）或 "ate"（返回 ε_mATE）
    """
    true_m, est_m = _pair(true_po, est_po, columns=None)
    k = true_m.shape[1]
    if k < 2:
        raise ArgumentError(f"多处理指标需要 k ≥ 2，实际 k={k}")
    if which not in ("pehe", "ate"):
        raise ArgumentError(f"未知指标: {which}")
    values = []
    for j, t in itertools.combinations(range(k), 2):
        cols = [j, t]
        if which == "pehe":
            values.append(pehe(true_m[:, cols], est_m[:, cols])[0])
        else:
            values.append(ate_error(true_m[:, cols], est_m[:, cols]))
    return float(np.mean(values))


def mse_potential(true_po: Matrix, est_po: Matrix) -> float:
    """全部 n·K 个单元格上的均方误差"""
    true_m, est_m = _pair(true_po, est_po, columns=None)
    return float(np.mean((true_m - est_m) ** 2))


def _responses(values: NDArray[np.float64], response_threshold: Optional[float]) -> NDArray[np.float64]:
    if response_threshold is None:
        return values
    return (values >= response_threshold).astype(np.float64)


def tgor(
    matrix: Matrix,
    dataset: Dataset,
    target: Union[Literal["mutation"], int],
    response_threshold: Optional[float] = None
) -> float:
    """
    靶向组客观缓解率

    Args:
        matrix: 完整的 n × K 潜在结果矩阵（观测数据需先推断反事实）
        dataset: 对应的数据集，提供组标签与事实结果
        target: "mutation" 计算 TGOR_mu；整数 t 计算第 t 组的 TGOR_tu
        response_threshold: 给定时先把结果二值化为 y ≥ 阈值

    Returns:
        TGOR_mu = 全矩阵均值；TGOR_tu = 第 t 组 n_c 个单元事实结果的均值
    """
    values = _matrix(matrix, "matrix")
    if values.shape != (dataset.n, dataset.group_count):
        raise ShapeError(f"矩阵形状 {values.shape} 与数据集 ({dataset.n}, {dataset.group_count}) 不一致")
    if target == "mutation":
        if not np.all(np.isfinite(values)):
            raise DataError("TGOR_mu 需要完整的潜在结果矩阵；观测数据只有事实结果，请先用模型推断反事实结果")
        return float(np.mean(_responses(values, response_threshold)))
    t = int(target)
    if not 0 <= t < dataset.group_count:
        raise ArgumentError(f"组下标 {t} 超出 0..{dataset.group_count - 1}")
    members = dataset.group == t
    if not members.any():
        raise DataError(f"第 {t} 组没有样本（n_c = 0），无法计算 TGOR_tu")
    return float(np.mean(_responses(dataset.factual_outcome[members], response_threshold)))


def tgor_borrowed(matrix: Matrix, t: int, response_threshold: Optional[float] = None) -> float:
    """借用全部单元推断出的第 t 列结果估计第 t 组的缓解率"""
    values = _matrix(matrix, "matrix")
    if not 0 <= t < values.shape[1]:
        raise ArgumentError(f"组下标 {t} 超出 0..{values.shape[1] - 1}")
    column = values[:, t]
    if not np.all(np.isfinite(column)):
        raise DataError(f"第 {t} 列不完整，请先推断反事实结果")
    return float(np.mean(_responses(column, response_threshold)))


REPORT_COLUMNS = ["dataset_id", "model_id", "replicate", "seed", "metric", "value"]


def reports_to_frame(reports: Iterable[MetricsReport]) -> pd.DataFrame:
    """展平为每个 (数据集, 模型, 重复, 指标) 一行的表格，保持插入顺序"""
    rows = []
    for report in reports:
        for metric, value in report.metrics.items():
            rows.append({
                "dataset_id": report.dataset_id,
                "model_id": report.model_id,
                "replicate": report.replicate,
                "seed": report.seed,
                "metric": metric,
                "value": value,
            })
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def summarize_reports(reports: Iterable[MetricsReport]) -> pd.DataFrame:
    """按 (数据集, 模型, 指标) 汇总重复实验的均值与标准差"""
    frame = reports_to_frame(reports)
    if frame.empty:
        return pd.DataFrame(columns=["dataset_id", "model_id", "metric", "mean", "std", "count"])
    grouped = frame.groupby(["dataset_id", "model_id", "metric"], sort=False)["value"]
    summary = grouped.agg(["mean", "std", "count"]).reset_index()
    summary["std"] = summary["std"].fillna(0.0)
    return summary
