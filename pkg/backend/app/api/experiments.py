"""实验面板：测试集 MSE 随偏移、组数、相关结构与惩罚系数的变化"""

import itertools
import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.errors import ArgumentError
from app.models.schemas import SynthConfig, TrainConfig
from app.mtal.training import holdout_mse, train
from app.synth.basket import generate_basket_dataset
from app.synth.correlation import CORRELATION_PRESETS, correlation_preset

logger = logging.getLogger(__name__)

PANELS = ("bias", "groups", "correlation", "penalty")
BIAS_LEVELS = [0.0, 0.25, 0.5, 1.0]
GROUP_COUNTS = [2, 3, 4, 5, 6]
PENALTY_PANEL_GRID = [0.0, 1e-4, 1e-2]
DEFAULT_BIAS = 0.5

RAW_COLUMNS = ["panel", "label", "x", "lambda", "alpha", "seed", "kl", "test_mse"]


class PanelPoint:
    """面板上的一个横坐标点：合成配置工厂与训练配置覆盖项"""

    def __init__(
        self,
        label: str,
        x: float,
        synth: Callable[[int], SynthConfig],
        overrides: Optional[Dict[str, float]] = None
    ):
        self.label = label
        self.x = x
        self.synth = synth
        self.overrides = overrides or {}


def panel_points(panel: str, units: int, block_dim: int, bias: float = DEFAULT_BIAS) -> List[PanelPoint]:
    """
    构造面板的全部横坐标点

    Args:
        panel: bias / groups / correlation / penalty
        units: 每组样本量 n_k
        block_dim: 每组预测变量块维度 d_k
        bias: 非 bias 面板使用的均值偏移

    Returns:
        PanelPoint 列表
    """
    if panel == "bias":
        return [
            PanelPoint(f"bias={c:g}", c, lambda seed, c=c: SynthConfig.basket(2, units, block_dim, c, seed))
            for c in BIAS_LEVELS
        ]
    if panel == "groups":
        return [
            PanelPoint(f"K={k}", float(k), lambda seed, k=k: SynthConfig.basket(k, units, block_dim, bias, seed))
            for k in GROUP_COUNTS
        ]
    if panel == "correlation":
        points = []
        for i, name in enumerate(CORRELATION_PRESETS):
            def factory(seed, name=name):
                config = SynthConfig.basket(2, units, block_dim, bias, seed)
                return config.model_copy(update={"spec": correlation_preset(name, config.spec.block_dims)})
            points.append(PanelPoint(name, float(i), factory))
        return points
    if panel == "penalty":
        return [
            PanelPoint(
                f"lambda={lam:g},alpha={alpha:g}",
                float("nan"),
                lambda seed: SynthConfig.basket(2, units, block_dim, bias, seed),
                {"lam": lam, "alpha": alpha},
            )
            for lam, alpha in itertools.product(PENALTY_PANEL_GRID, PENALTY_PANEL_GRID)
        ]
    raise ArgumentError(f"未知面板 {panel}，可选: {', '.join(PANELS)}")


def run_panel(
    panel: str,
    seeds: Sequence[int],
    base: TrainConfig,
    units: int = 500,
    block_dim: int = 10,
    bias: float = DEFAULT_BIAS
) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    对面板上的每个点与每个种子：生成合成数据、训练 MTAL、计算测试集 MSE

    Returns:
        (逐次运行的原始表, 按点汇总的均值/标准差表)
    """
    if not seeds:
        raise ArgumentError("种子列表为空")
    rows = []
    for point in panel_points(panel, units, block_dim, bias):
        for seed in seeds:
            synthetic = generate_basket_dataset(point.synth(int(seed)))
            config = base.updated(seed=int(seed), **point.overrides)
            result = train(synthetic.dataset, config)
            kl = float(synthetic.kl_table["kl"].max()) if len(synthetic.kl_table) else 0.0
            mse = holdout_mse(result, synthetic.dataset)
            rows.append({
                "panel": panel,
                "label": point.label,
                "x": kl if panel == "bias" else point.x,
                "lambda": config.lam,
                "alpha": config.alpha,
                "seed": int(seed),
                "kl": kl,
                "test_mse": mse,
            })
            logger.info(f"[{panel}] {point.label} seed={seed}: KL={kl:.4f} test MSE={mse:.5f}")
    raw = pd.DataFrame(rows, columns=RAW_COLUMNS)
    return raw, summarize_panel(raw)


def summarize_panel(raw: pd.DataFrame) -> pd.DataFrame:
    grouped = raw.groupby("label", sort=False)
    summary = grouped.agg(
        x=("x", "first"),
        lam=("lambda", "first"),
        alpha=("alpha", "first"),
        kl=("kl", "mean"),
        mean_mse=("test_mse", "mean"),
        std_mse=("test_mse", "std"),
        runs=("test_mse", "count"),
    ).reset_index().rename(columns={"lam": "lambda"})
    summary["std_mse"] = summary["std_mse"].fillna(0.0)
    return summary


def penalty_heat_table(summary: pd.DataFrame) -> pd.DataFrame:
    """(λ, α) 热力表：行为 λ，列为 α，值为平均测试 MSE"""
    return summary.pivot(index="lambda", columns="alpha", values="mean_mse")


def inversions(values: Sequence[float]) -> int:
    """相邻下降的次数，用于检查曲线是否大体单调不减"""
    array = np.asarray(values, dtype=np.float64)
    return int(np.sum(np.diff(array) < 0))
