"""hub-Toeplitz 相关块、跨块拼装、多元正态抽样与高斯 KL"""

import logging
from typing import Dict, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import block_diag, toeplitz

from app.errors import ConfigError, NumericError, SimulationError
from app.models.schemas import CorrelationSpec, build_config

logger = logging.getLogger(__name__)

# 名称 → (rho_max, rho_min, 跨块相关占安全上界的比例)
CORRELATION_PRESETS: Dict[str, Tuple[float, float, float]] = {
    "weak": (0.2, 0.0, 0.0),
    "weak-cross": (0.2, 0.0, 0.5),
    "moderate": (0.5, 0.1, 0.0),
    "moderate-cross": (0.5, 0.1, 0.5),
    "strong": (0.7, 0.3, 0.0),
    "strong-cross": (0.7, 0.3, 0.5),
    "very-strong": (0.9, 0.5, 0.0),
    "very-strong-cross": (0.9, 0.5, 0.5),
}


def _is_positive_definite(matrix: NDArray[np.float64]) -> bool:
    try:
        np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError:
        return False
    return True


def hub_toeplitz_first_column(d: int, rho_max: float, rho_min: float, gamma: float) -> NDArray[np.float64]:
    """首列：c[0] = 1，c[l] = ρ_max - ((l-1)/(d-2))^γ·(ρ_max-ρ_min)，d = 2 时 c[1] = ρ_max"""
    column = np.ones(d)
    if d == 2:
        column[1] = rho_max
        return column
    lags = np.arange(1, d)
    column[1:] = rho_max - ((lags - 1) / (d - 2)) ** gamma * (rho_max - rho_min)
    return column


def hub_toeplitz_block(d: int, rho_max: float, rho_min: float, gamma: float) -> NDArray[np.float64]:
    """
    hub 相关块：首列按 hub 公式从 ρ_max 递减到 ρ_min，其余位置按 Toeplitz 结构填充

    Args:
        d: 块维度，至少为 2
        rho_max: 与 hub 变量的最大相关
        rho_min: 与 hub 变量的最小相关
        gamma: 递减速率指数

    Returns:
        d × d 对称、单位对角的正定矩阵
    """
    if d < 2:
        raise ConfigError(f"块维度至少为 2: {d}")
    if not 0.0 <= rho_min <= rho_max < 1.0:
        raise ConfigError(f"需要 0 ≤ rho_min ≤ rho_max < 1，实际 rho_min={rho_min}, rho_max={rho_max}")
    if gamma <= 0:
        raise ConfigError(f"gamma 必须为正: {gamma}")
    block = toeplitz(hub_toeplitz_first_column(d, rho_max, rho_min, gamma))
    if not _is_positive_definite(block):
        raise SimulationError(
            f"相关块不正定 (d={d}, rho_max={rho_max}, rho_min={rho_min}, gamma={gamma})，"
            f"请减小 rho_max 或增大 gamma"
        )
    return block


def _blocks(spec: CorrelationSpec):
    return [hub_toeplitz_block(d, spec.rho_max, spec.rho_min, spec.gamma) for d in spec.block_dims]


def block_labels(block_dims: Sequence[int]) -> NDArray[np.int64]:
    """每个坐标所属的块编号"""
    return np.repeat(np.arange(len(block_dims)), block_dims)


def smallest_block_eigenvalue(spec: CorrelationSpec) -> float:
    """块对角矩阵的最小特征值（各块最小特征值的最小值）"""
    return float(min(np.linalg.eigvalsh(b)[0] for b in _blocks(spec)))


def safe_cross_block_delta(spec: CorrelationSpec) -> float:
    """
    保证正定的跨块相关上界 λ_min / (d - min d_k)

    跨块扰动矩阵每行绝对值之和不超过 δ·(d - min d_k)，低于 λ_min 时整体仍正定。
    只有一个块时没有跨块元素，返回 λ_min。
    """
    lam_min = smallest_block_eigenvalue(spec)
    others = spec.dim - min(spec.block_dims)
    return lam_min if others == 0 else lam_min / others


def assemble_correlation(spec: CorrelationSpec) -> NDArray[np.float64]:
    """
    把各 hub-Toeplitz 块放在对角线上，所有跨块元素取常数 δ

    Args:
        spec: 相关结构参数

    Returns:
        d × d 正定相关矩阵
    """
    blocks = _blocks(spec)
    base = block_diag(*blocks)
    lam_min = float(np.linalg.eigvalsh(base)[0])
    delta = spec.cross_block_delta
    if delta >= lam_min:
        raise SimulationError(f"跨块相关 δ={delta} 必须小于块对角矩阵的最小特征值 λ_min={lam_min:.6g}")

    labels = block_labels(spec.block_dims)
    matrix = base.copy()
    matrix[labels[:, None] != labels[None, :]] = delta
    if not _is_positive_definite(matrix):
        raise SimulationError(
            f"跨块相关 δ={delta} 使矩阵失去正定性 (λ_min={lam_min:.6g})，"
            f"保证正定的上界为 {safe_cross_block_delta(spec):.6g}"
        )
    return matrix


def correlation_preset(name: str, block_dims: Sequence[int], gamma: float = 1.0) -> CorrelationSpec:
    """按预设名称构造相关结构，跨块相关取安全上界的固定比例"""
    if name not in CORRELATION_PRESETS:
        raise ConfigError(f"未知相关预设 {name}，可选: {', '.join(CORRELATION_PRESETS)}")
    rho_max, rho_min, fraction = CORRELATION_PRESETS[name]
    spec = build_config(
        CorrelationSpec, block_dims=list(block_dims), rho_max=rho_max, rho_min=rho_min, gamma=gamma
    )
    if fraction == 0.0 or len(spec.block_dims) == 1:
        return spec
    return spec.model_copy(update={"cross_block_delta": fraction * safe_cross_block_delta(spec)})


def sample_mvn(
    mean: NDArray[np.float64],
    correlation: NDArray[np.float64],
    n: int,
    rng: np.random.Generator
) -> NDArray[np.float64]:
    """x = μ + L·z，其中 R = L·Lᵀ，z 为标准正态；n = 0 返回空矩阵"""
    mean = np.asarray(mean, dtype=np.float64)
    try:
        lower = np.linalg.cholesky(correlation)
    except np.linalg.LinAlgError as e:
        raise NumericError(f"相关矩阵无法做 Cholesky 分解: {e}") from e
    z = rng.standard_normal((n, mean.shape[0]))
    return mean + z @ lower.T


def _logdet(matrix: NDArray[np.float64], name: str) -> float:
    sign, value = np.linalg.slogdet(matrix)
    if sign <= 0:
        raise NumericError(f"{name} 不是正定矩阵")
    return float(value)


def gaussian_kl(
    mean0: NDArray[np.float64],
    cov0: NDArray[np.float64],
    mean1: NDArray[np.float64],
    cov1: NDArray[np.float64]
) -> float:
    """
    KL(N₀‖N₁) 的闭式解

    ½[tr(Σ₁⁻¹Σ₀) + (μ₁-μ₀)ᵀΣ₁⁻¹(μ₁-μ₀) - d + ln det Σ₁ - ln det Σ₀]
    """
    mean0 = np.asarray(mean0, dtype=np.float64)
    mean1 = np.asarray(mean1, dtype=np.float64)
    diff = mean1 - mean0
    try:
        solved = np.linalg.solve(cov1, np.column_stack([cov0, diff]))
    except np.linalg.LinAlgError as e:
        raise NumericError(f"协方差矩阵奇异: {e}") from e
    d = mean0.shape[0]
    trace = float(np.trace(solved[:, :d]))
    mahalanobis = float(diff @ solved[:, d])
    value = 0.5 * (trace + mahalanobis - d + _logdet(cov1, "Σ₁") - _logdet(cov0, "Σ₀"))
    return max(value, 0.0)


def symmetric_kl(
    mean0: NDArray[np.float64],
    cov0: NDArray[np.float64],
    mean1: NDArray[np.float64],
    cov1: NDArray[np.float64]
) -> float:
    """两个方向 KL 的平均"""
    return 0.5 * (gaussian_kl(mean0, cov0, mean1, cov1) + gaussian_kl(mean1, cov1, mean0, cov0))
