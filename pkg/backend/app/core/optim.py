from dataclasses import dataclass, field
from typing import Iterable, Tuple

import numpy as np

from app.core.tensor import GradientBundle
from app.errors import ConfigError, NumericError, ShapeError


@dataclass
class AdamState:
    """Adam 优化器状态，一阶/二阶矩与参数同形"""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: GradientBundle = field(default_factory=dict)
    second_moment: GradientBundle = field(default_factory=dict)


def adam_step(
    params: GradientBundle,
    grads: GradientBundle,
    state: AdamState
) -> Tuple[GradientBundle, AdamState]:
    """
    带偏差修正的 Adam 更新，原地修改参数数组

    Args:
        params: 参数名到参数数组的映射（数组为网络参数本身的引用）
        grads: 同键同形的梯度
        state: 优化器状态，step 加一

    Returns:
        (更新后的参数, 更新后的状态)
    """
    for name, grad in grads.items():
        if name not in params:
            raise ShapeError(f"梯度 {name} 没有对应参数")
        if grad.shape != params[name].shape:
            raise ShapeError(f"参数 {name} 形状 {params[name].shape} 与梯度形状 {grad.shape} 不一致")
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"参数组 {name} 的梯度含有非有限值")

    state.step += 1
    bias1 = 1.0 - state.beta1 ** state.step
    bias2 = 1.0 - state.beta2 ** state.step
    for name, grad in grads.items():
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(grad)
            v = np.zeros_like(grad)
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.first_moment[name] = m
        state.second_moment[name] = v
        m_hat = m / bias1
        v_hat = v / bias2
        params[name] -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return params, state


def adam_proximal_l1(
    params: GradientBundle,
    names: Iterable[str],
    state: AdamState,
    alpha: float
) -> GradientBundle:
    """
    在 Adam 的对角度量下对 L1 项做近端（软阈值）更新，原地修改参数

    紧跟 adam_step 调用，使用同一步的二阶矩：
    w ← sign(w)·max(|w| − η·α / (√v̂ + ε), 0)。
    梯度长期小于 α 的坐标被精确置零，梯度更大的坐标保留。

    Args:
        params: 参数名到参数数组的映射
        names: 施加 L1 的参数名
        state: 刚完成一步的 Adam 状态
        alpha: L1 系数 α ≥ 0

    Returns:
        更新后的参数
    """
    if alpha < 0:
        raise ConfigError(f"L1 系数必须非负: alpha={alpha}")
    if alpha == 0.0 or state.step == 0:
        return params
    bias2 = 1.0 - state.beta2 ** state.step
    for name in names:
        v = state.second_moment.get(name)
        if v is None:
            continue
        threshold = state.learning_rate * alpha / (np.sqrt(v / bias2) + state.epsilon)
        w = params[name]
        w[...] = np.sign(w) * np.maximum(np.abs(w) - threshold, 0.0)
    return params
