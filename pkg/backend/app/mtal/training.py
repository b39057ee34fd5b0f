import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from numpy.typing import NDArray

from app.core.optim import AdamState, adam_proximal_l1, adam_step
from app.core.penalties import elastic_net
from app.core.tensor import GradientBundle, add_bundles
from app.errors import ConfigError, DataError, NumericError, ShapeError, TrainingAbortedError
from app.models.dataset import (
    Batch,
    Dataset,
    ImputedOutcomes,
    Scaler,
    Split,
    standardize,
    stratified_split,
    validate,
)
from app.models.schemas import TrainConfig
from app.mtal.discriminator import (
    TFDiscriminator,
    balanced_accuracy,
    build_discriminator,
    judge_batch,
)
from app.mtal.generator import (
    OutcomeGenerator,
    backward_all,
    build_generator,
    factual_mse,
    forward_all,
    predict_potential_outcomes,
)

logger = logging.getLogger(__name__)


@dataclass
class EpochRecord:
    epoch: int
    generator_loss: float
    discriminator_loss: float
    validation_mse: float
    discriminator_accuracy: float


@dataclass
class TrainHistory:
    """每个完成的训练轮次一条记录"""

    records: List[EpochRecord] = field(default_factory=list)
    best_epoch: Optional[int] = None
    stopped_early: bool = False

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> List[float]:
        return [getattr(r, name) for r in self.records]

    def accuracy_drop(self, window: int = 5) -> float:
        """判别器平衡准确率从前半程峰值到最后 window 轮均值的下降量"""
        accuracy = self.column("discriminator_accuracy")
        if not accuracy:
            return 0.0
        peak = max(accuracy[:max(1, len(accuracy) // 2)])
        return peak - float(np.mean(accuracy[-window:]))

    def to_dict(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "stopped_early": self.stopped_early,
            "records": [r.__dict__ for r in self.records],
        }


@dataclass
class Optimizers:
    generator: AdamState
    discriminator: AdamState

    @classmethod
    def from_config(cls, config: TrainConfig) -> "Optimizers":
        def _state():
            return AdamState(
                learning_rate=config.learning_rate,
                beta1=config.adam_beta1,
                beta2=config.adam_beta2,
                epsilon=config.adam_epsilon,
            )
        return cls(generator=_state(), discriminator=_state())


@dataclass
class StepLosses:
    generator_loss: float
    discriminator_loss: float


@dataclass
class TrainResult:
    generator: OutcomeGenerator
    discriminator: TFDiscriminator
    history: TrainHistory
    scaler: Scaler
    split: Split


def balanced_batch(
    dataset: Dataset,
    split: Split,
    m: int,
    rng: np.random.Generator,
    subset: str = "train"
) -> Batch:
    """
    每组有放回地均匀抽取 m 个单元

    Args:
        dataset: 数据集（通常已标准化）
        split: 划分
        m: 每组单元数
        rng: 随机数生成器
        subset: 从哪一部分抽取，默认训练集

    Returns:
        按组顺序排列的 k·m 个单元组成的批次
    """
    if m < 1:
        raise ConfigError(f"每组单元数 m 必须为正: {m}")
    pool = split.subset(subset)
    chosen = []
    for t in range(dataset.group_count):
        members = pool[dataset.group[pool] == t]
        if members.size == 0:
            raise DataError(f"正值性失败: 第 {t} 组在 {subset} 集中没有样本")
        chosen.append(rng.choice(members, size=m, replace=True))
    return Batch.from_dataset(dataset, np.concatenate(chosen))


def _check_finite(value: float, what: str) -> float:
    if not math.isfinite(value):
        raise NumericError(f"{what} 非有限: {value}")
    return value


def discriminator_update(
    gen: OutcomeGenerator,
    disc: TFDiscriminator,
    batch: Batch,
    config: TrainConfig,
    state: AdamState,
    rng: np.random.Generator
) -> float:
    """冻结生成器，对 φ 做一步 max(-β·L_{φ,g})，即最小化 β·L_{φ,g}"""
    yhat, _ = forward_all(gen, batch.covariates, training=False)
    result = judge_batch(disc, batch, yhat, training=True, rng=rng)
    _check_finite(result.loss, "判别器损失")
    grads = {name: config.beta * g for name, g in result.disc_grads.items()}
    adam_step(disc.parameters(), grads, state)
    return result.loss


def generator_update(
    gen: OutcomeGenerator,
    disc: TFDiscriminator,
    batch: Batch,
    config: TrainConfig,
    state: AdamState,
    rng: np.random.Generator
) -> float:
    """
    冻结判别器，对 g 做一步 min(L_g - β·L_{φ,g})

    L2 项随数据梯度进入 Adam；L1 项在 Adam 之后以软阈值近端步处理，
    使与该头结果无关的特征选择权重精确归零。

    Returns:
        更新前的生成器目标值（含完整弹性网惩罚）
    """
    yhat, caches = forward_all(gen, batch.covariates, training=True, rng=rng)
    mse, d_yhat = factual_mse(yhat, batch)
    objective = mse
    if config.beta > 0.0:
        result = judge_batch(disc, batch, yhat, training=False)
        objective -= config.beta * result.loss
        d_yhat = d_yhat - config.beta * result.d_yhat
    grads: GradientBundle = backward_all(gen, caches, d_yhat)
    penalized = gen.penalized_parameters()
    penalty, _ = elastic_net(penalized, gen.lam, gen.alpha)
    _, ridge = elastic_net(penalized, gen.lam, 0.0)
    add_bundles(grads, ridge)
    objective += penalty
    _check_finite(objective, "生成器目标")
    params = gen.parameters()
    adam_step(params, grads, state)
    adam_proximal_l1(params, penalized.keys(), state, gen.alpha)
    return objective


def evaluate_losses(gen: OutcomeGenerator, disc: TFDiscriminator, batch: Batch) -> StepLosses:
    yhat, _ = forward_all(gen, batch.covariates, training=False)
    mse, _ = factual_mse(yhat, batch)
    penalty, _ = elastic_net(gen.penalized_parameters(), gen.lam, gen.alpha)
    result = judge_batch(disc, batch, yhat, training=False)
    return StepLosses(
        generator_loss=_check_finite(mse + penalty, "生成器损失"),
        discriminator_loss=_check_finite(result.loss, "判别器损失"),
    )


def adversarial_step(
    gen: OutcomeGenerator,
    disc: TFDiscriminator,
    batch: Batch,
    config: TrainConfig,
    optimizers: Optimizers,
    rng: np.random.Generator
) -> StepLosses:
    """
    一次极小极大迭代：判别器一步，随后生成器 G 步（复用同一批次）

    Returns:
        更新后在该批次上的 (L_g, L_{φ,g})
    """
    discriminator_update(gen, disc, batch, config, optimizers.discriminator, rng)
    for _ in range(config.generator_steps):
        generator_update(gen, disc, batch, config, optimizers.generator, rng)
    return evaluate_losses(gen, disc, batch)


def _validation_mse(gen: OutcomeGenerator, data: Dataset, indices: NDArray, scaler: Scaler) -> float:
    """原始结果尺度上的验证集事实 MSE"""
    yhat, _ = forward_all(gen, data.covariates[indices], training=False)
    factual = yhat[np.arange(indices.size), data.group[indices]]
    residual = (factual - data.factual_outcome[indices]) * scaler.y_std
    return float(np.mean(residual ** 2))


def _monitor_subset(data: Dataset, split: Split) -> str:
    if split.validation.size and np.all(np.bincount(data.group[split.validation], minlength=data.group_count) > 0):
        return "validation"
    return "train"


def _streams(seed: int):
    # 初始化、划分、批次、dropout、监控各用独立的随机流
    return tuple(np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(5))


def split_for(dataset: Dataset, config: TrainConfig) -> Split:
    """与 train 在同一种子下使用的分层划分相同"""
    return stratified_split(dataset, config.split_fractions, _streams(config.seed)[1])


def train(dataset: Dataset, config: TrainConfig, split: Optional[Split] = None) -> TrainResult:
    """
    对抗训练 MTAL，保留验证集事实 MSE 最小的生成器快照

    Args:
        dataset: 原始尺度的数据集
        config: 训练配置
        split: 划分；为空时按 config.split_fractions 与种子分层划分

    Returns:
        TrainResult（生成器、判别器、训练历史、标准化器、划分）
    """
    validate(dataset)
    init_rng, split_rng, batch_rng, dropout_rng, monitor_rng = _streams(config.seed)

    if split is None:
        split = stratified_split(dataset, config.split_fractions, split_rng)
    split.check(dataset.n)
    if split.validation.size == 0:
        raise ConfigError("验证集为空，无法进行早停")

    data, scaler = standardize(dataset, split)
    gen = build_generator(
        data.d, data.k, config.layers, config.width, config.lam, config.alpha, init_rng,
        dropout_rate=config.dropout_rate, feature_selection=config.feature_selection,
    )
    disc = build_discriminator(
        data.d, data.k, config.layers, config.width, config.lam, config.alpha, init_rng,
        dropout_rate=config.dropout_rate, feature_selection=config.feature_selection,
    )
    history = TrainHistory()
    if config.max_epochs == 0:
        return TrainResult(gen, disc, history, scaler, split)

    optimizers = Optimizers.from_config(config)
    monitor_batch = balanced_batch(
        data, split, config.units_per_group, monitor_rng, subset=_monitor_subset(data, split)
    )
    steps_per_epoch = max(1, math.ceil(split.train.size / (data.k * config.units_per_group)))
    best_mse = math.inf
    best_params: Dict[str, NDArray] = {}
    since_best = 0

    for epoch in range(config.max_epochs):
        try:
            for _ in range(steps_per_epoch):
                batch = balanced_batch(data, split, config.units_per_group, batch_rng)
                losses = adversarial_step(gen, disc, batch, config, optimizers, dropout_rng)
            val_mse = _check_finite(_validation_mse(gen, data, split.validation, scaler), "验证集 MSE")
            yhat, _ = forward_all(gen, monitor_batch.covariates, training=False)
            accuracy = balanced_accuracy(judge_batch(disc, monitor_batch, yhat, training=False))
        except NumericError as e:
            raise TrainingAbortedError(epoch, str(e)) from e

        history.records.append(EpochRecord(
            epoch=epoch,
            generator_loss=losses.generator_loss,
            discriminator_loss=losses.discriminator_loss,
            validation_mse=val_mse,
            discriminator_accuracy=accuracy,
        ))
        logger.debug(
            f"epoch={epoch} L_g={losses.generator_loss:.5f} L_d={losses.discriminator_loss:.5f} "
            f"val_mse={val_mse:.5f} acc={accuracy:.3f}"
        )

        if epoch < config.warmup_epochs:
            continue
        if val_mse < best_mse:
            best_mse = val_mse
            history.best_epoch = epoch
            best_params = {name: value.copy() for name, value in gen.parameters().items()}
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                history.stopped_early = True
                logger.info(f"验证集 MSE 连续 {config.patience} 轮未改善，在第 {epoch} 轮早停")
                break

    if best_params:
        gen.load_parameters(best_params)
    elif history.records:
        # 全部轮次都在预热期内，保留最后一轮
        history.best_epoch = len(history) - 1
        best_mse = history.records[-1].validation_mse
    logger.info(f"训练完成: 共 {len(history)} 轮，最佳轮次 {history.best_epoch}，验证集 MSE {best_mse:.5f}")
    return TrainResult(gen, disc, history, scaler, split)


def impute_counterfactuals(
    gen: OutcomeGenerator,
    dataset: Dataset,
    scaler: Optional[Scaler] = None
) -> ImputedOutcomes:
    """
    推断每个单元在全部组下的潜在结果（关闭 dropout，还原到原始结果尺度）

    Args:
        gen: 训练好的生成器
        dataset: 原始尺度的数据集
        scaler: 训练时使用的标准化器；为空表示恒等变换

    Returns:
        n × k 潜在结果矩阵
    """
    scaler = scaler if scaler is not None else Scaler.identity(dataset.d)
    if dataset.d != gen.input_dim or scaler.x_mean.shape[0] != gen.input_dim:
        raise ShapeError(f"数据集维度 d={dataset.d} 与生成器输入维度 {gen.input_dim} 不一致")
    if dataset.group_count != gen.group_count:
        raise ShapeError(f"数据集组数 k={dataset.group_count} 与生成器头数 {gen.group_count} 不一致")
    x = scaler.transform_covariates(dataset.covariates)
    predicted = predict_potential_outcomes(gen, x, training=False)
    return ImputedOutcomes(values=scaler.inverse_outcome(predicted.values))


def train_and_impute(dataset: Dataset, config: TrainConfig) -> Tuple[TrainResult, ImputedOutcomes]:
    result = train(dataset, config)
    return result, impute_counterfactuals(result.generator, dataset, result.scaler)


def holdout_mse(result: TrainResult, dataset: Dataset, subset: str = "test") -> float:
    """在指定划分上计算全部潜在结果的 MSE；没有真值或该划分为空时返回 NaN"""
    if dataset.potential_outcomes is None:
        return math.nan
    indices = result.split.subset(subset)
    if indices.size == 0:
        return math.nan
    imputed = impute_counterfactuals(result.generator, dataset.subset(indices), result.scaler)
    return float(np.mean((dataset.potential_outcomes[indices] - imputed.values) ** 2))
