from typing import Dict

import numpy as np
from numpy.typing import NDArray

from app.errors import NumericError, ShapeError

# 行优先的二维实数矩阵
Tensor2 = NDArray[np.float64]

# 与网络参数布局一一对应的梯度（键为参数名）
GradientBundle = Dict[str, NDArray[np.float64]]


def as_tensor2(values, name: str = "input") -> Tensor2:
    """
    转换为二维 float64 矩阵并检查有限性

    Args:
        values: 任意可转换为数组的对象
        name: 出错时报告的名称

    Returns:
        二维 float64 数组
    """
    array = np.asarray(values, dtype=np.float64)
    if array.ndim == 1:
        array = array.reshape(1, -1)
    if array.ndim != 2:
        raise ShapeError(f"{name} 必须是二维矩阵，实际维度 {array.ndim}")
    if not np.all(np.isfinite(array)):
        raise NumericError(f"{name} 含有非有限值")
    return array


def add_bundles(target: GradientBundle, other: GradientBundle, scale: float = 1.0) -> GradientBundle:
    """把 other 按 scale 累加到 target（原地），返回 target"""
    for key, value in other.items():
        if key in target:
            target[key] = target[key] + scale * value
        else:
            target[key] = scale * value
    return target
