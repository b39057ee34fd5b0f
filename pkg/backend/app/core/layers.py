from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit

from app.core.tensor import Tensor2
from app.errors import ConfigError, ShapeError

ACTIVATIONS = ("relu", "linear", "sigmoid")


def _activate(z: Tensor2, activation: str) -> Tensor2:
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "sigmoid":
        return expit(z)
    return z


def _activation_grad(z: Tensor2, out: Tensor2, activation: str) -> Tensor2:
    if activation == "relu":
        return (z > 0.0).astype(np.float64)
    if activation == "sigmoid":
        return out * (1.0 - out)
    return np.ones_like(z)


@dataclass
class DenseCache:
    """前向传播缓存，反向传播时使用"""
    inputs: Tensor2
    pre_activation: Tensor2
    outputs: Tensor2


@dataclass
class DenseLayer:
    """全连接层：activation(x·W + b)"""

    weights: NDArray[np.float64]
    bias: NDArray[np.float64]
    activation: str = "linear"

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64)
        self.bias = np.array(self.bias, dtype=np.float64).reshape(-1)
        if self.weights.ndim != 2:
            raise ShapeError(f"weights 必须是二维矩阵，实际维度 {self.weights.ndim}")
        if self.bias.shape[0] != self.weights.shape[1]:
            raise ShapeError(
                f"bias 长度 {self.bias.shape[0]} 与输出维度 {self.weights.shape[1]} 不一致"
            )
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"未知激活函数: {self.activation}")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def initialize(
        cls,
        in_dim: int,
        out_dim: int,
        activation: str,
        rng: np.random.Generator
    ) -> "DenseLayer":
        """
        Glorot 均匀初始化权重，偏置置零

        Args:
            in_dim: 输入维度
            out_dim: 输出维度
            activation: 激活函数名
            rng: 随机数生成器

        Returns:
            新建的全连接层
        """
        if in_dim <= 0 or out_dim <= 0:
            raise ConfigError(f"层维度必须为正: in={in_dim}, out={out_dim}")
        limit = np.sqrt(6.0 / (in_dim + out_dim))
        weights = rng.uniform(-limit, limit, size=(in_dim, out_dim))
        return cls(weights=weights, bias=np.zeros(out_dim), activation=activation)

    def forward(self, x: Tensor2) -> Tuple[Tensor2, DenseCache]:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"输入列数 {x.shape[-1]} 与层输入维度 {self.in_dim} 不一致")
        z = x @ self.weights + self.bias
        out = _activate(z, self.activation)
        return out, DenseCache(inputs=x, pre_activation=z, outputs=out)

    def backward(
        self,
        cache: DenseCache,
        grad_out: Tensor2
    ) -> Tuple[Tensor2, NDArray[np.float64], NDArray[np.float64]]:
        """
        反向传播

        Returns:
            (对输入的梯度, 对 weights 的梯度, 对 bias 的梯度)
        """
        delta = grad_out * _activation_grad(cache.pre_activation, cache.outputs, self.activation)
        grad_weights = cache.inputs.T @ delta
        grad_bias = delta.sum(axis=0)
        grad_in = delta @ self.weights.T
        return grad_in, grad_weights, grad_bias

@dataclass
class OneToOneLayer:
    """一对一特征选择层：每个输入只连接到对应节点，逐元素加权，无偏置无激活"""

    diag_weights: NDArray[np.float64] = field(default_factory=lambda: np.ones(1))

    def __post_init__(self):
        self.diag_weights = np.array(self.diag_weights, dtype=np.float64).reshape(-1)

    @property
    def dim(self) -> int:
        return self.diag_weights.shape[0]

    @classmethod
    def initialize(cls, dim: int) -> "OneToOneLayer":
        # 初始为恒等映射
        if dim <= 0:
            raise ConfigError(f"特征维度必须为正: {dim}")
        return cls(diag_weights=np.ones(dim))

    def forward(self, x: Tensor2) -> Tensor2:
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeError(f"输入列数 {x.shape[-1]} 与特征选择层维度 {self.dim} 不一致")
        return x * self.diag_weights

    def backward(self, x: Tensor2, grad_out: Tensor2) -> Tuple[Tensor2, NDArray[np.float64]]:
        return grad_out * self.diag_weights, (grad_out * x).sum(axis=0)


def dropout_mask(dim: int, rate: float, rng: Optional[np.random.Generator]) -> NDArray[np.float64]:
    """
    生成反向缩放的 dropout 掩码

    Args:
        dim: 掩码长度
        rate: 置零概率，取值 [0, 1)
        rng: 随机数生成器（rate 为 0 时可为 None）

    Returns:
        元素为 0 或 1/(1-rate) 的向量
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate 必须在 [0, 1) 内: {rate}")
    if rate == 0.0:
        return np.ones(dim)
    if rng is None:
        raise ConfigError("dropout rate > 0 时必须提供随机数生成器")
    keep = rng.random(dim) >= rate
    return keep.astype(np.float64) / (1.0 - rate)
