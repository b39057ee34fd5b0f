from typing import Mapping, Sequence, Tuple, Union

import numpy as np
from numpy.typing import NDArray

from app.core.tensor import GradientBundle
from app.errors import ConfigError

WeightGroups = Union[Mapping[str, NDArray[np.float64]], Sequence[NDArray[np.float64]]]


def elastic_net(
    weight_groups: WeightGroups,
    lam: float,
    alpha: float
) -> Tuple[float, GradientBundle]:
    """
    弹性网惩罚 λ·Σ‖w‖₂² + α·Σ‖w‖₁ 及其次梯度 2λw + α·sign(w)

    Args:
        weight_groups: 参数名到权重数组的映射，或权重数组列表（此时以下标为键）
        lam: L2 系数 λ ≥ 0
        alpha: L1 系数 α ≥ 0

    Returns:
        (惩罚值, 与 weight_groups 同键的次梯度)，sign(0) 取 0
    """
    if lam < 0 or alpha < 0:
        raise ConfigError(f"弹性网系数必须非负: lambda={lam}, alpha={alpha}")

    if isinstance(weight_groups, Mapping):
        items = list(weight_groups.items())
    else:
        items = [(str(i), w) for i, w in enumerate(weight_groups)]

    penalty = 0.0
    subgradient: GradientBundle = {}
    for name, weights in items:
        w = np.asarray(weights, dtype=np.float64)
        penalty += lam * float(np.sum(w * w)) + alpha * float(np.sum(np.abs(w)))
        subgradient[name] = 2.0 * lam * w + alpha * np.sign(w)
    return penalty, subgradient
