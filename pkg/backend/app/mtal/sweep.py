import logging
import math
import traceback
from concurrent.futures import ProcessPoolExecutor
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.errors import ArgumentError, MTALError
from app.models.dataset import Dataset
from app.models.schemas import SweepGrid, TrainConfig
from app.mtal.training import holdout_mse, train

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = [
    "cell", "seed", "beta", "lambda", "alpha", "layers", "width", "units_per_group",
    "validation_mse", "test_mse", "best_epoch", "epochs", "error",
]


def sample_grid(
    grid: SweepGrid,
    base: TrainConfig,
    sample: Optional[int] = None,
    seed: int = 0
) -> List[Tuple[int, TrainConfig]]:
    """
    展开网格；给定 sample 时用种子无放回抽取 sample 个格点

    Returns:
        (格点编号, 配置) 列表，按格点编号升序
    """
    cells = list(enumerate(grid.cells(base)))
    if sample is None or sample >= len(cells):
        return cells
    if sample < 1:
        raise ArgumentError(f"抽样格点数必须为正: {sample}")
    chosen = np.sort(np.random.default_rng(seed).choice(len(cells), size=sample, replace=False))
    return [cells[i] for i in chosen]


def run_cell(job: Tuple[int, Dataset, TrainConfig]) -> dict:
    """训练单个 (配置, 种子) 格点；失败时记录错误而不抛出"""
    cell, dataset, config = job
    row = {
        "cell": cell,
        "seed": config.seed,
        "beta": config.beta,
        "lambda": config.lam,
        "alpha": config.alpha,
        "layers": config.layers,
        "width": config.width,
        "units_per_group": config.units_per_group,
        "validation_mse": math.nan,
        "test_mse": math.nan,
        "best_epoch": -1,
        "epochs": 0,
        "error": "",
    }
    try:
        result = train(dataset, config)
        history = result.history
        row["epochs"] = len(history)
        if history.best_epoch is not None:
            row["best_epoch"] = history.best_epoch
            row["validation_mse"] = history.records[history.best_epoch].validation_mse
        row["test_mse"] = holdout_mse(result, dataset)
    except MTALError as e:
        row["error"] = f"{type(e).__name__}: {e}"
    except Exception as e:  # noqa: BLE001
        row["error"] = f"{type(e).__name__}: {e}"
        logger.debug(traceback.format_exc())
    return row


def run_sweep(
    dataset: Dataset,
    cells: Sequence[Tuple[int, TrainConfig]],
    seeds: Sequence[int],
    workers: int = 1
) -> pd.DataFrame:
    """
    对每个 (格点, 种子) 训练 MTAL，按验证集事实 MSE 排序

    各格点使用各自的种子，互不共享状态，因此并行与串行结果相同。

    Args:
        dataset: 原始尺度的数据集
        cells: sample_grid 的输出
        seeds: 种子列表
        workers: 进程数，1 表示串行

    Returns:
        排序后的结果表；失败的格点排在最后，error 列记录原因
    """
    if not cells:
        raise ArgumentError("网格为空")
    if not seeds:
        raise ArgumentError("种子列表为空")
    jobs = [
        (cell, dataset, config.updated(seed=int(seed)))
        for cell, config in cells
        for seed in seeds
    ]
    logger.info(f"超参数搜索: {len(cells)} 个格点 × {len(seeds)} 个种子，{workers} 个进程")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            rows = list(executor.map(run_cell, jobs))
    else:
        rows = [run_cell(job) for job in jobs]

    for row in rows:
        if row["error"]:
            logger.warning(f"格点 {row['cell']} (seed={row['seed']}) 失败: {row['error']}")

    frame = pd.DataFrame(rows, columns=SWEEP_COLUMNS)
    frame["failed"] = frame["error"] != ""
    frame = frame.sort_values(
        ["failed", "validation_mse", "cell", "seed"], kind="mergesort", na_position="last"
    ).drop(columns="failed").reset_index(drop=True)
    frame.insert(0, "rank", np.arange(1, len(frame) + 1))
    return frame


def best_config(frame: pd.DataFrame, base: TrainConfig) -> TrainConfig:
    """取排序第一且成功的格点，还原为 TrainConfig"""
    ok = frame[frame["error"] == ""]
    if ok.empty:
        raise ArgumentError("所有格点均失败，没有可用的最佳配置")
    top = ok.iloc[0]
    return base.updated(
        beta=float(top["beta"]),
        lam=float(top["lambda"]),
        alpha=float(top["alpha"]),
        layers=int(top["layers"]),
        width=int(top["width"]),
        units_per_group=int(top["units_per_group"]),
        seed=int(top["seed"]),
    )
