import logging
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from app.core.gradcheck import finite_diff_gradients, relative_errors
from app.core.tensor import GradientBundle
from app.models.dataset import Batch
from app.mtal.discriminator import TFDiscriminator, build_discriminator, discriminator_loss_and_grads
from app.mtal.generator import OutcomeGenerator, build_generator, generator_loss_and_grads

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 1e-4


@dataclass
class GradientCheckReport:
    """解析梯度与中心差分的比较结果"""

    seed: int
    tolerance: float
    shapes: Dict[str, int]
    max_errors: Dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(err < self.tolerance for err in self.max_errors.values())

    def summary(self) -> str:
        lines = [f"seed={self.seed} " + " ".join(f"{k}={v}" for k, v in self.shapes.items())]
        for name, err in self.max_errors.items():
            status = "通过" if err < self.tolerance else "失败"
            lines.append(f"  [{status}] {name}: 最大相对误差 {err:.3e}")
        return "\n".join(lines)


def _randomize(params: GradientBundle, rng: np.random.Generator, scale: float = 0.5) -> None:
    for array in params.values():
        array[...] = rng.normal(0.0, scale, size=array.shape)


def _tiny_models(rng: np.random.Generator, d: int, k: int, width: int, lam: float, alpha: float):
    gen = build_generator(d, k, 2, width, lam, alpha, rng, dropout_rate=0.0)
    disc = build_discriminator(d, k, 2, width, lam, alpha, rng, dropout_rate=0.0)
    _randomize(gen.parameters(), rng)
    _randomize(disc.parameters(), rng)
    return gen, disc


def _tiny_batch(rng: np.random.Generator, d: int, k: int, m: int) -> Batch:
    group = np.repeat(np.arange(k), m)
    return Batch(
        covariates=rng.normal(size=(k * m, d)),
        group=group,
        outcome=rng.normal(size=k * m),
        group_count=k,
    )


def _worst(errors: Dict[str, float]) -> float:
    return max(errors.values()) if errors else 0.0


def _corrupt(grads: GradientBundle) -> None:
    name = sorted(grads)[0]
    grads[name].reshape(-1)[0] += 1.0


def run_gradient_check(
    seed: int,
    d: Optional[int] = None,
    k: Optional[int] = None,
    width: Optional[int] = None,
    h: float = 1e-5,
    tolerance: float = DEFAULT_TOLERANCE,
    corrupt: bool = False
) -> GradientCheckReport:
    """
    在随机小网络上比较反向传播梯度与中心差分梯度

    检查三项：生成器目标对生成器参数、判别器损失对判别器参数、判别器损失对生成器参数。
    dropout 关闭，弹性网系数取非零值以覆盖惩罚项梯度。

    Args:
        seed: 随机种子，决定维度、参数与批次
        d: 协变量维度，默认在 2..8 中随机
        k: 组数，默认在 2..4 中随机
        width: 网络宽度，默认在 3..6 中随机
        h: 差分步长
        tolerance: 最大相对误差阈值
        corrupt: 测试钩子，人为篡改一个解析梯度分量

    Returns:
        GradientCheckReport
    """
    rng = np.random.default_rng(seed)
    d = int(d if d is not None else rng.integers(2, 9))
    k = int(k if k is not None else rng.integers(2, 5))
    width = int(width if width is not None else rng.integers(3, 7))
    m = int(rng.integers(1, 4))
    gen, disc = _tiny_models(rng, d, k, width, lam=1e-3, alpha=1e-3)
    batch = _tiny_batch(rng, d, k, m)
    report = GradientCheckReport(seed=seed, tolerance=tolerance, shapes={"d": d, "k": k, "width": width, "m": m})

    report.max_errors.update(check_models(gen, disc, batch, h, corrupt=corrupt))
    logger.debug(report.summary())
    return report


def check_models(
    gen: OutcomeGenerator,
    disc: TFDiscriminator,
    batch: Batch,
    h: float = 1e-5,
    corrupt: bool = False
) -> Dict[str, float]:
    """对给定模型和批次做三项检查，返回各项最大相对误差"""
    _, gen_grads = generator_loss_and_grads(gen, batch)
    if corrupt:
        _corrupt(gen_grads)
    errors = {
        "generator": _worst(relative_errors(
            gen_grads,
            finite_diff_gradients(lambda: generator_loss_and_grads(gen, batch)[0], gen.parameters(), h),
        ))
    }
    _, disc_grads, gen_via_disc = discriminator_loss_and_grads(disc, gen, batch)

    def loss():
        return discriminator_loss_and_grads(disc, gen, batch, generator_grads=False)[0]

    errors["discriminator/φ"] = _worst(relative_errors(disc_grads, finite_diff_gradients(loss, disc.parameters(), h)))
    errors["discriminator/g"] = _worst(relative_errors(gen_via_disc, finite_diff_gradients(loss, gen.parameters(), h)))
    return errors
