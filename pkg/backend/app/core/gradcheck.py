from typing import Callable, Dict

import numpy as np

from app.core.tensor import GradientBundle
from app.errors import ConfigError, NumericError

# 相对误差分母下限，避免两侧梯度都接近零时放大舍入误差
RELATIVE_ERROR_FLOOR = 1e-6


def finite_diff_gradients(
    loss_fn: Callable[[], float],
    params: GradientBundle,
    h: float = 1e-5
) -> GradientBundle:
    """
    中心差分梯度 (f(θ+h) - f(θ-h)) / 2h

    Args:
        loss_fn: 无参损失函数，读取 params 当前取值；必须是确定性的
        params: 参数名到参数数组的映射，逐元素原地扰动后恢复
        h: 差分步长

    Returns:
        与 params 同键同形的数值梯度
    """
    if h <= 0:
        raise ConfigError(f"差分步长必须为正: {h}")

    gradients: GradientBundle = {}
    for name, array in params.items():
        grad = np.zeros_like(array)
        flat = array.reshape(-1)
        grad_flat = grad.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            plus = loss_fn()
            flat[i] = original - h
            minus = loss_fn()
            flat[i] = original
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise NumericError(f"参数组 {name} 第 {i} 个元素扰动后损失非有限")
            grad_flat[i] = (plus - minus) / (2.0 * h)
        gradients[name] = grad
    return gradients


def relative_errors(analytic: GradientBundle, numeric: GradientBundle) -> Dict[str, float]:
    """逐参数组的最大相对误差 |a-b| / max(|a|, |b|, floor)"""
    errors = {}
    for name, grad in numeric.items():
        a = analytic.get(name, np.zeros_like(grad))
        denom = np.maximum(np.maximum(np.abs(a), np.abs(grad)), RELATIVE_ERROR_FLOOR)
        errors[name] = float(np.max(np.abs(a - grad) / denom)) if grad.size else 0.0
    return errors
