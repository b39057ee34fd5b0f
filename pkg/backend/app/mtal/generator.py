import copy
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from numpy.typing import NDArray

from app.core.layers import DenseCache, DenseLayer, OneToOneLayer, dropout_mask
from app.core.penalties import elastic_net
from app.core.tensor import GradientBundle, Tensor2, add_bundles, as_tensor2
from app.errors import ArgumentError, ConfigError, ShapeError
from app.models.dataset import Batch, ImputedOutcomes

logger = logging.getLogger(__name__)


@dataclass
class GeneratorHead:
    """单个肿瘤类型的头网络：一对一特征选择层 → 若干 ReLU 表示层 → 线性标量输出"""

    selection: Optional[OneToOneLayer]
    representation_layers: List[DenseLayer]
    output: DenseLayer

    def parameters(self, prefix: str) -> Dict[str, NDArray[np.float64]]:
        params = {}
        if self.selection is not None:
            params[f"{prefix}.selection"] = self.selection.diag_weights
        for s, layer in enumerate(self.representation_layers):
            params[f"{prefix}.rep{s}.weights"] = layer.weights
            params[f"{prefix}.rep{s}.bias"] = layer.bias
        params[f"{prefix}.out.weights"] = self.output.weights
        params[f"{prefix}.out.bias"] = self.output.bias
        return params

    def penalized(self, prefix: str) -> Dict[str, NDArray[np.float64]]:
        # 只惩罚特征选择层和表示层的权重，不含偏置与输出层
        params = {}
        if self.selection is not None:
            params[f"{prefix}.selection"] = self.selection.diag_weights
        for s, layer in enumerate(self.representation_layers):
            params[f"{prefix}.rep{s}.weights"] = layer.weights
        return params


@dataclass
class HeadCache:
    inputs: Tensor2
    layer_caches: List[DenseCache] = field(default_factory=list)
    masks: List[Optional[NDArray[np.float64]]] = field(default_factory=list)
    output_cache: Optional[DenseCache] = None


@dataclass
class OutcomeGenerator:
    """结果生成器 g：k 个相互独立的头网络"""

    heads: List[GeneratorHead]
    lam: float = 0.0
    alpha: float = 0.0
    dropout_rate: float = 0.1

    @property
    def group_count(self) -> int:
        return len(self.heads)

    @property
    def input_dim(self) -> int:
        first = self.heads[0]
        if first.selection is not None:
            return first.selection.dim
        return first.representation_layers[0].in_dim

    def parameters(self) -> Dict[str, NDArray[np.float64]]:
        params = {}
        for t, head in enumerate(self.heads):
            params.update(head.parameters(f"head{t}"))
        return params

    def penalized_parameters(self) -> Dict[str, NDArray[np.float64]]:
        params = {}
        for t, head in enumerate(self.heads):
            params.update(head.penalized(f"head{t}"))
        return params

    def load_parameters(self, values: Dict[str, NDArray[np.float64]]) -> None:
        params = self.parameters()
        for name, target in params.items():
            if name not in values:
                raise ShapeError(f"缺少参数 {name}")
            source = np.asarray(values[name], dtype=np.float64)
            if source.shape != target.shape:
                raise ShapeError(f"参数 {name} 形状 {source.shape} 与模型 {target.shape} 不一致")
            target[...] = source

    def clone(self) -> "OutcomeGenerator":
        return copy.deepcopy(self)


def build_generator(
    d: int,
    k: int,
    layers: int,
    width: int,
    lam: float,
    alpha: float,
    rng: np.random.Generator,
    dropout_rate: float = 0.1,
    feature_selection: bool = True
) -> OutcomeGenerator:
    """
    构建 k 个结构相同、独立初始化的头网络

    Args:
        d: 协变量维度
        k: 组数
        layers: 每个头的表示层数 S_t
        width: 表示层宽度
        lam: L2 系数 λ
        alpha: L1 系数 α
        rng: 初始化用随机数生成器
        dropout_rate: 训练时表示层的 dropout 比例
        feature_selection: 是否包含一对一特征选择层

    Returns:
        初始化好的 OutcomeGenerator
    """
    if d <= 0 or k <= 0 or width <= 0 or layers <= 0:
        raise ConfigError(f"生成器维度必须为正: d={d}, k={k}, layers={layers}, width={width}")
    if lam < 0 or alpha < 0:
        raise ConfigError(f"弹性网系数必须非负: lambda={lam}, alpha={alpha}")
    if not 0.0 <= dropout_rate < 1.0:
        raise ConfigError(f"dropout rate 必须在 [0, 1) 内: {dropout_rate}")
    if not 2 <= layers <= 5:
        logger.warning(f"表示层数 {layers} 超出常用范围 2-5")

    heads = []
    for _ in range(k):
        selection = OneToOneLayer.initialize(d) if feature_selection else None
        rep = []
        in_dim = d
        for _ in range(layers):
            rep.append(DenseLayer.initialize(in_dim, width, "relu", rng))
            in_dim = width
        output = DenseLayer.initialize(in_dim, 1, "linear", rng)
        heads.append(GeneratorHead(selection=selection, representation_layers=rep, output=output))
    return OutcomeGenerator(heads=heads, lam=lam, alpha=alpha, dropout_rate=dropout_rate)


def head_forward(
    head: GeneratorHead,
    x: Tensor2,
    training: bool = False,
    dropout_rate: float = 0.0,
    rng: Optional[np.random.Generator] = None
) -> Tuple[NDArray[np.float64], HeadCache]:
    cache = HeadCache(inputs=x)
    h = head.selection.forward(x) if head.selection is not None else x
    for layer in head.representation_layers:
        h, layer_cache = layer.forward(h)
        cache.layer_caches.append(layer_cache)
        mask = None
        if training and dropout_rate > 0.0:
            mask = dropout_mask(h.size, dropout_rate, rng).reshape(h.shape)
            h = h * mask
        cache.masks.append(mask)
    out, cache.output_cache = head.output.forward(h)
    return out[:, 0], cache


def head_backward(
    head: GeneratorHead,
    cache: HeadCache,
    d_out: NDArray[np.float64],
    prefix: str
) -> GradientBundle:
    grads: GradientBundle = {}
    grad_h, grads[f"{prefix}.out.weights"], grads[f"{prefix}.out.bias"] = head.output.backward(
        cache.output_cache, d_out.reshape(-1, 1)
    )
    for s in reversed(range(len(head.representation_layers))):
        mask = cache.masks[s]
        if mask is not None:
            grad_h = grad_h * mask
        grad_h, grads[f"{prefix}.rep{s}.weights"], grads[f"{prefix}.rep{s}.bias"] = (
            head.representation_layers[s].backward(cache.layer_caches[s], grad_h)
        )
    if head.selection is not None:
        _, grads[f"{prefix}.selection"] = head.selection.backward(cache.inputs, grad_h)
    return grads


def forward_all(
    gen: OutcomeGenerator,
    x: Tensor2,
    training: bool = False,
    rng: Optional[np.random.Generator] = None
) -> Tuple[NDArray[np.float64], List[HeadCache]]:
    """所有头作用于所有行，返回 (n × k 预测矩阵, 各头缓存)"""
    x = as_tensor2(x, "covariates")
    if x.shape[1] != gen.input_dim:
        raise ShapeError(f"输入列数 {x.shape[1]} 与生成器输入维度 {gen.input_dim} 不一致")
    columns, caches = [], []
    for head in gen.heads:
        out, cache = head_forward(head, x, training, gen.dropout_rate, rng)
        columns.append(out)
        caches.append(cache)
    return np.column_stack(columns), caches


def backward_all(
    gen: OutcomeGenerator,
    caches: List[HeadCache],
    d_yhat: NDArray[np.float64]
) -> GradientBundle:
    """由 n × k 预测矩阵的梯度反传到各头参数；第 t 列只影响第 t 个头"""
    grads: GradientBundle = {}
    for t, head in enumerate(gen.heads):
        grads.update(head_backward(head, caches[t], d_yhat[:, t], f"head{t}"))
    return grads


def predict_potential_outcomes(
    gen: OutcomeGenerator,
    x: Tensor2,
    training: bool = False,
    rng: Optional[np.random.Generator] = None
) -> ImputedOutcomes:
    """
    预测每个单元在全部 k 组下的潜在结果

    Args:
        gen: 结果生成器
        x: n × d 协变量
        training: 是否启用 dropout
        rng: training 为 True 时使用的随机数生成器

    Returns:
        第 t 列为第 t 个头输出的 n × k 矩阵
    """
    yhat, _ = forward_all(gen, x, training, rng)
    return ImputedOutcomes(values=yhat)


def factual_mse(
    yhat: NDArray[np.float64],
    batch: Batch
) -> Tuple[float, NDArray[np.float64]]:
    """事实结果的均方误差及其对预测矩阵的梯度（非事实单元梯度为 0）"""
    n = batch.size
    rows = np.arange(n)
    residual = yhat[rows, batch.group] - batch.outcome
    d_yhat = np.zeros_like(yhat)
    d_yhat[rows, batch.group] = 2.0 * residual / n
    return float(np.mean(residual ** 2)), d_yhat


def generator_loss_and_grads(
    gen: OutcomeGenerator,
    batch: Batch,
    training: bool = False,
    rng: Optional[np.random.Generator] = None
) -> Tuple[float, GradientBundle]:
    """生成器目标：事实 MSE + 弹性网，返回 (损失, 梯度)"""
    if batch.size == 0:
        raise ArgumentError("批次为空")
    yhat, caches = forward_all(gen, batch.covariates, training, rng)
    mse, d_yhat = factual_mse(yhat, batch)
    grads = backward_all(gen, caches, d_yhat)
    penalty, subgrad = elastic_net(gen.penalized_parameters(), gen.lam, gen.alpha)
    add_bundles(grads, subgrad)
    return mse + penalty, grads


def generator_factual_loss(gen: OutcomeGenerator, batch: Batch) -> float:
    """生成器目标在评估模式（无 dropout）下的取值"""
    loss, _ = generator_loss_and_grads(gen, batch, training=False)
    return loss
