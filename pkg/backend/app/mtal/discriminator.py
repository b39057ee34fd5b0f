import copy
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from numpy.typing import NDArray

from app.core.layers import DenseCache, DenseLayer, OneToOneLayer, dropout_mask
from app.core.penalties import elastic_net
from app.core.tensor import GradientBundle, Tensor2, add_bundles
from app.errors import ArgumentError, ConfigError, ShapeError
from app.models.dataset import Batch
from app.mtal.generator import OutcomeGenerator, backward_all, forward_all

PROBABILITY_CLAMP = 1e-7


@dataclass
class DiscriminatorHead:
    """
    判别器头网络

    每个隐藏层（以及输出层）的输入都在末尾拼接候选结果标量，宽度逐层递减。
    """

    selection: Optional[OneToOneLayer]
    layers: List[DenseLayer]
    output: DenseLayer

    def parameters(self, prefix: str) -> Dict[str, NDArray[np.float64]]:
        params = {}
        if self.selection is not None:
            params[f"{prefix}.selection"] = self.selection.diag_weights
        for r, layer in enumerate(self.layers):
            params[f"{prefix}.layer{r}.weights"] = layer.weights
            params[f"{prefix}.layer{r}.bias"] = layer.bias
        params[f"{prefix}.out.weights"] = self.output.weights
        params[f"{prefix}.out.bias"] = self.output.bias
        return params

    def penalized(self, prefix: str) -> Dict[str, NDArray[np.float64]]:
        params = {}
        if self.selection is not None:
            params[f"{prefix}.selection"] = self.selection.diag_weights
        for r, layer in enumerate(self.layers):
            params[f"{prefix}.layer{r}.weights"] = layer.weights
        return params

    @property
    def widths(self) -> List[int]:
        return [layer.out_dim for layer in self.layers]


@dataclass
class DiscHeadCache:
    inputs: Tensor2
    layer_caches: List[DenseCache] = field(default_factory=list)
    masks: List[Optional[NDArray[np.float64]]] = field(default_factory=list)
    output_cache: Optional[DenseCache] = None


@dataclass
class TFDiscriminator:
    """真假判别器 φ：每组一个头，判断 (x, t, y) 中的 y 是否为事实结果"""

    heads: List[DiscriminatorHead]
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
        return first.layers[0].in_dim - 1

    @property
    def class_weights(self) -> Tuple[float, float]:
        """(w0, w1)：w0 = (k-1)/k 乘事实项，w1 = 1/k 乘反事实项"""
        k = self.group_count
        return (k - 1) / k, 1.0 / k

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
        for name, target in self.parameters().items():
            if name not in values:
                raise ShapeError(f"缺少参数 {name}")
            source = np.asarray(values[name], dtype=np.float64)
            if source.shape != target.shape:
                raise ShapeError(f"参数 {name} 形状 {source.shape} 与模型 {target.shape} 不一致")
            target[...] = source

    def clone(self) -> "TFDiscriminator":
        return copy.deepcopy(self)


def width_schedule(top_width: int, layers: int) -> List[int]:
    """从 top_width 开始逐层减半（向下取整，最小为 1），必须严格递减"""
    if layers < 2:
        raise ConfigError(f"判别器层数至少为 2: {layers}")
    widths = [max(top_width // (2 ** r), 1) for r in range(layers)]
    if any(b >= a for a, b in zip(widths, widths[1:])):
        raise ConfigError(f"无法构造严格递减的宽度序列: top_width={top_width}, layers={layers} → {widths}")
    return widths


def build_discriminator(
    d: int,
    k: int,
    layers: int,
    top_width: int,
    lam: float,
    alpha: float,
    rng: np.random.Generator,
    dropout_rate: float = 0.1,
    feature_selection: bool = True
) -> TFDiscriminator:
    """
    构建判别器，宽度从 top_width 逐层减半

    Args:
        d: 协变量维度
        k: 组数
        layers: 隐藏层数 r_t
        top_width: 第一隐藏层宽度
        lam: L2 系数 λ
        alpha: L1 系数 α
        rng: 初始化用随机数生成器

    Returns:
        初始化好的 TFDiscriminator
    """
    if d <= 0 or k <= 0 or top_width <= 0:
        raise ConfigError(f"判别器维度必须为正: d={d}, k={k}, top_width={top_width}")
    if lam < 0 or alpha < 0:
        raise ConfigError(f"弹性网系数必须非负: lambda={lam}, alpha={alpha}")
    if not 0.0 <= dropout_rate < 1.0:
        raise ConfigError(f"dropout rate 必须在 [0, 1) 内: {dropout_rate}")
    widths = width_schedule(top_width, layers)

    heads = []
    for _ in range(k):
        selection = OneToOneLayer.initialize(d) if feature_selection else None
        hidden = []
        in_dim = d
        for width in widths:
            hidden.append(DenseLayer.initialize(in_dim + 1, width, "relu", rng))
            in_dim = width
        output = DenseLayer.initialize(in_dim + 1, 1, "sigmoid", rng)
        heads.append(DiscriminatorHead(selection=selection, layers=hidden, output=output))
    return TFDiscriminator(heads=heads, lam=lam, alpha=alpha, dropout_rate=dropout_rate)


def _with_outcome(h: Tensor2, v: NDArray[np.float64]) -> Tensor2:
    return np.hstack([h, v.reshape(-1, 1)])


def head_forward(
    head: DiscriminatorHead,
    x: Tensor2,
    v: NDArray[np.float64],
    training: bool = False,
    dropout_rate: float = 0.0,
    rng: Optional[np.random.Generator] = None
) -> Tuple[NDArray[np.float64], DiscHeadCache]:
    cache = DiscHeadCache(inputs=x)
    h = head.selection.forward(x) if head.selection is not None else x
    for layer in head.layers:
        h, layer_cache = layer.forward(_with_outcome(h, v))
        cache.layer_caches.append(layer_cache)
        mask = None
        if training and dropout_rate > 0.0:
            mask = dropout_mask(h.size, dropout_rate, rng).reshape(h.shape)
            h = h * mask
        cache.masks.append(mask)
    p, cache.output_cache = head.output.forward(_with_outcome(h, v))
    return p[:, 0], cache


def head_backward(
    head: DiscriminatorHead,
    cache: DiscHeadCache,
    d_p: NDArray[np.float64],
    prefix: str
) -> Tuple[GradientBundle, NDArray[np.float64]]:
    """返回 (参数梯度, 对候选结果 v 的梯度)"""
    grads: GradientBundle = {}
    grad_in, grads[f"{prefix}.out.weights"], grads[f"{prefix}.out.bias"] = head.output.backward(
        cache.output_cache, d_p.reshape(-1, 1)
    )
    d_v = grad_in[:, -1].copy()
    grad_h = grad_in[:, :-1]
    for r in reversed(range(len(head.layers))):
        mask = cache.masks[r]
        if mask is not None:
            grad_h = grad_h * mask
        grad_in, grads[f"{prefix}.layer{r}.weights"], grads[f"{prefix}.layer{r}.bias"] = (
            head.layers[r].backward(cache.layer_caches[r], grad_h)
        )
        d_v += grad_in[:, -1]
        grad_h = grad_in[:, :-1]
    if head.selection is not None:
        _, grads[f"{prefix}.selection"] = head.selection.backward(cache.inputs, grad_h)
    return grads, d_v


def judge(
    disc: TFDiscriminator,
    x: NDArray[np.float64],
    t: int,
    y_candidate: float,
    training: bool = False,
    rng: Optional[np.random.Generator] = None
) -> float:
    """
    第 t 个头判断 y_candidate 是单元 x 事实结果的概率

    Args:
        disc: 判别器
        x: 单个单元的协变量（长度 d）
        t: 组下标
        y_candidate: 候选结果

    Returns:
        概率 P ∈ (0, 1)
    """
    if not 0 <= t < disc.group_count:
        raise ArgumentError(f"组下标 {t} 超出 0..{disc.group_count - 1}")
    row = np.asarray(x, dtype=np.float64).reshape(1, -1)
    if row.shape[1] != disc.input_dim:
        raise ShapeError(f"输入列数 {row.shape[1]} 与判别器输入维度 {disc.input_dim} 不一致")
    p, _ = head_forward(disc.heads[t], row, np.array([float(y_candidate)]), training, disc.dropout_rate, rng)
    return float(p[0])


@dataclass
class JudgePass:
    """判别器在一个组平衡批次上的一次前向/反向结果"""

    cross_entropy: float
    penalty: float
    disc_grads: GradientBundle
    d_yhat: NDArray[np.float64]
    probabilities: List[NDArray[np.float64]]
    truths: List[NDArray[np.bool_]]

    @property
    def loss(self) -> float:
        return self.cross_entropy + self.penalty


def judge_batch(
    disc: TFDiscriminator,
    batch: Batch,
    yhat: NDArray[np.float64],
    training: bool = False,
    rng: Optional[np.random.Generator] = None
) -> JudgePass:
    """
    在组平衡批次上计算判别器的加权交叉熵与弹性网

    第 t 个头接收：第 t 组单元的 (x, y^f)（真值 1），其余单元的 (x, ŷ_t)（真值 0）。
    归一化常数为 1/(m·k·k)：每个头按其 k·m 个输入取平均，再对 k 个头取平均。

    Args:
        disc: 判别器
        batch: 组平衡批次（每组 m 个单元）
        yhat: 生成器对该批次的 n × k 预测
        training: 是否启用 dropout

    Returns:
        JudgePass，其中 d_yhat 为交叉熵对 yhat 的梯度（事实单元处为 0）
    """
    m = batch.units_per_group()
    k = disc.group_count
    if batch.group_count != k or yhat.shape != (batch.size, k):
        raise ShapeError(f"批次组数 {batch.group_count} / 预测形状 {yhat.shape} 与判别器 k={k} 不一致")
    w0, w1 = disc.class_weights
    scale = 1.0 / (m * k * k)

    cross_entropy = 0.0
    grads: GradientBundle = {}
    d_yhat = np.zeros_like(yhat)
    probabilities, truths = [], []
    for t, head in enumerate(disc.heads):
        truth = batch.group == t
        v = np.where(truth, batch.outcome, yhat[:, t])
        p, cache = head_forward(head, batch.covariates, v, training, disc.dropout_rate, rng)
        pc = np.clip(p, PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP)
        terms = np.where(truth, w0 * np.log(pc), w1 * np.log(1.0 - pc))
        cross_entropy -= scale * float(np.sum(terms))

        inside = (p > PROBABILITY_CLAMP) & (p < 1.0 - PROBABILITY_CLAMP)
        d_p = -scale * np.where(truth, w0 / pc, -w1 / (1.0 - pc)) * inside
        head_grads, d_v = head_backward(head, cache, d_p, f"head{t}")
        grads.update(head_grads)
        d_yhat[:, t] = np.where(truth, 0.0, d_v)
        probabilities.append(p)
        truths.append(truth)

    penalty, subgrad = elastic_net(disc.penalized_parameters(), disc.lam, disc.alpha)
    add_bundles(grads, subgrad)
    return JudgePass(
        cross_entropy=cross_entropy,
        penalty=penalty,
        disc_grads=grads,
        d_yhat=d_yhat,
        probabilities=probabilities,
        truths=truths,
    )


def discriminator_loss_and_grads(
    disc: TFDiscriminator,
    gen: OutcomeGenerator,
    batch: Batch,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    generator_grads: bool = True
) -> Tuple[float, GradientBundle, Optional[GradientBundle]]:
    """
    L_{φ,g} 及其对判别器、生成器参数的梯度

    生成器梯度经由 ŷ^{cf} 传回（事实输入使用观测值 y^f，不依赖生成器）。

    Returns:
        (损失, 判别器梯度, 生成器梯度或 None)
    """
    yhat, caches = forward_all(gen, batch.covariates, training, rng)
    result = judge_batch(disc, batch, yhat, training, rng)
    gen_grads = backward_all(gen, caches, result.d_yhat) if generator_grads else None
    return result.loss, result.disc_grads, gen_grads


def discriminator_loss(disc: TFDiscriminator, gen: OutcomeGenerator, batch: Batch) -> float:
    """判别器损失 L_{φ,g} 在评估模式下的取值"""
    loss, _, _ = discriminator_loss_and_grads(disc, gen, batch, generator_grads=False)
    return loss


def balanced_accuracy(result: JudgePass) -> float:
    """以 0.5 为阈值的平衡准确率：(事实输入召回 + 反事实输入特异度) / 2"""
    p = np.concatenate(result.probabilities)
    truth = np.concatenate(result.truths)
    predicted = p > 0.5
    tpr = float(np.mean(predicted[truth])) if truth.any() else 0.0
    if not (~truth).any():
        return tpr
    tnr = float(np.mean(~predicted[~truth]))
    return 0.5 * (tpr + tnr)
