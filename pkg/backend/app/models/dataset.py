import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray

from app.errors import ArgumentError, DatasetValidationError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_SPLIT_FRACTIONS = (0.63, 0.27, 0.10)
STD_FLOOR = 1e-8


def _frozen(array: Optional[NDArray], dtype) -> Optional[NDArray]:
    if array is None:
        return None
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Dataset:
    """
    多组数据集：协变量、组标签（0..k-1）、事实结果，以及已知时的全部潜在结果

    构造后数组只读，可在并发读取者之间共享。
    """

    covariates: NDArray[np.float64]
    group: NDArray[np.int64]
    factual_outcome: NDArray[np.float64]
    group_count: int
    potential_outcomes: Optional[NDArray[np.float64]] = None
    noiseless_outcomes: Optional[NDArray[np.float64]] = None
    feature_names: Optional[Tuple[str, ...]] = None
    group_labels: Optional[Tuple[str, ...]] = None
    name: str = "dataset"

    def __post_init__(self):
        object.__setattr__(self, "covariates", _frozen(self.covariates, np.float64))
        object.__setattr__(self, "group", _frozen(self.group, np.int64))
        object.__setattr__(self, "factual_outcome", _frozen(self.factual_outcome, np.float64))
        object.__setattr__(self, "potential_outcomes", _frozen(self.potential_outcomes, np.float64))
        object.__setattr__(self, "noiseless_outcomes", _frozen(self.noiseless_outcomes, np.float64))
        if self.feature_names is not None:
            object.__setattr__(self, "feature_names", tuple(self.feature_names))
        if self.group_labels is not None:
            object.__setattr__(self, "group_labels", tuple(str(g) for g in self.group_labels))

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def d(self) -> int:
        return self.covariates.shape[1] if self.covariates.ndim == 2 else 0

    @property
    def k(self) -> int:
        return self.group_count

    def group_sizes(self) -> NDArray[np.int64]:
        return np.bincount(self.group, minlength=self.group_count)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return replace(
            self,
            covariates=self.covariates[idx],
            group=self.group[idx],
            factual_outcome=self.factual_outcome[idx],
            potential_outcomes=None if self.potential_outcomes is None else self.potential_outcomes[idx],
            noiseless_outcomes=None if self.noiseless_outcomes is None else self.noiseless_outcomes[idx],
        )


@dataclass(frozen=True)
class ImputedOutcomes:
    """估计的 n × k 潜在结果矩阵"""

    values: NDArray[np.float64]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ShapeError(f"潜在结果矩阵必须是二维，实际维度 {values.ndim}")
        if not np.all(np.isfinite(values)):
            raise ShapeError("潜在结果矩阵含有非有限值")
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    def factual(self, group: NDArray[np.int64]) -> NDArray[np.float64]:
        return self.values[np.arange(self.values.shape[0]), group]


@dataclass(frozen=True)
class Split:
    """训练/验证/测试下标"""

    train: NDArray[np.int64]
    validation: NDArray[np.int64]
    test: NDArray[np.int64]

    def check(self, n: int) -> None:
        parts = np.concatenate([self.train, self.validation, self.test])
        if parts.size != n or np.unique(parts).size != n or (n and (parts.min() < 0 or parts.max() >= n)):
            raise DatasetValidationError("split", f"划分必须互不相交且覆盖 0..{n - 1}")

    def subset(self, name: str) -> NDArray[np.int64]:
        if name == "all":
            return np.sort(np.concatenate([self.train, self.validation, self.test]))
        return getattr(self, name)


@dataclass(frozen=True)
class Batch:
    """一个训练批次（可能是组平衡的）"""

    covariates: NDArray[np.float64]
    group: NDArray[np.int64]
    outcome: NDArray[np.float64]
    group_count: int
    indices: Optional[NDArray[np.int64]] = None

    @classmethod
    def from_dataset(cls, dataset: Dataset, indices: Optional[Sequence[int]] = None) -> "Batch":
        if indices is None:
            indices = np.arange(dataset.n)
        idx = np.asarray(indices, dtype=np.int64)
        return cls(
            covariates=dataset.covariates[idx],
            group=dataset.group[idx],
            outcome=dataset.factual_outcome[idx],
            group_count=dataset.group_count,
            indices=idx,
        )

    @property
    def size(self) -> int:
        return self.group.shape[0]

    def units_per_group(self) -> int:
        """组平衡批次中每组的样本数 m，不平衡时抛出 ArgumentError"""
        counts = np.bincount(self.group, minlength=self.group_count)
        if counts.size != self.group_count or counts.min() < 1 or counts.min() != counts.max():
            raise ArgumentError(f"批次不是组平衡的: 各组样本数 {counts.tolist()}")
        return int(counts[0])


@dataclass
class ValidationReport:
    ok: bool
    group_sizes: List[int]
    warnings: List[str] = field(default_factory=list)


def validate(dataset: Dataset, min_group_size: int = 5) -> ValidationReport:
    """
    检查数据集不变量，并对样本过少的组给出正值性警告

    Args:
        dataset: 待检查的数据集（不会被修改）
        min_group_size: 正值性警告阈值

    Returns:
        检查报告；不变量不满足时抛出 DatasetValidationError
    """
    x = dataset.covariates
    if x.ndim != 2:
        raise DatasetValidationError("covariates", f"必须是二维矩阵，实际维度 {x.ndim}")
    n, d = x.shape
    if n == 0:
        raise DatasetValidationError("covariates", "样本量 n 必须大于 0")
    if d == 0:
        raise DatasetValidationError("covariates", "特征维度 d 必须大于 0")
    if not np.all(np.isfinite(x)):
        raise DatasetValidationError("covariates", "含有非有限值")
    if dataset.group_count < 1:
        raise DatasetValidationError("group_count", f"必须至少为 1: {dataset.group_count}")
    if dataset.group.shape != (n,):
        raise DatasetValidationError("group", f"长度必须为 n={n}，实际形状 {dataset.group.shape}")
    if dataset.group.min() < 0 or dataset.group.max() >= dataset.group_count:
        raise DatasetValidationError("group", f"取值必须在 0..{dataset.group_count - 1} 内")
    if dataset.factual_outcome.shape != (n,):
        raise DatasetValidationError("factual_outcome", f"长度必须为 n={n}")
    if not np.all(np.isfinite(dataset.factual_outcome)):
        raise DatasetValidationError("factual_outcome", "含有非有限值")
    if dataset.feature_names is not None and len(dataset.feature_names) != d:
        raise DatasetValidationError("feature_names", f"长度必须为 d={d}")
    if dataset.group_labels is not None and len(dataset.group_labels) != dataset.group_count:
        raise DatasetValidationError("group_labels", f"长度必须为 k={dataset.group_count}")

    for name in ("potential_outcomes", "noiseless_outcomes"):
        matrix = getattr(dataset, name)
        if matrix is None:
            continue
        if matrix.shape != (n, dataset.group_count):
            raise DatasetValidationError(name, f"形状必须为 ({n}, {dataset.group_count})，实际 {matrix.shape}")
        if not np.all(np.isfinite(matrix)):
            raise DatasetValidationError(name, "含有非有限值")

    if dataset.potential_outcomes is not None:
        factual = dataset.potential_outcomes[np.arange(n), dataset.group]
        mismatch = np.flatnonzero(np.abs(factual - dataset.factual_outcome) > 1e-12)
        if mismatch.size:
            raise DatasetValidationError(
                "potential_outcomes",
                f"一致性假设不成立：第 {int(mismatch[0])} 行的事实列与 factual_outcome 不相等",
            )

    sizes = dataset.group_sizes()
    warnings = []
    for t, size in enumerate(sizes):
        if size < min_group_size:
            message = f"正值性警告: 第 {t} 组只有 {int(size)} 个样本（阈值 {min_group_size}）"
            logger.warning(message)
            warnings.append(message)
    return ValidationReport(ok=True, group_sizes=[int(s) for s in sizes], warnings=warnings)


def _round_half_up(value: float) -> int:
    return int(np.floor(value + 0.5))


def stratified_split(
    dataset: Dataset,
    fractions: Sequence[float] = DEFAULT_SPLIT_FRACTIONS,
    rng: Optional[np.random.Generator] = None
) -> Split:
    """
    按组分层划分训练/验证/测试集

    Args:
        dataset: 数据集
        fractions: (训练, 验证, 测试) 比例，非负且和为 1
        rng: 随机数生成器

    Returns:
        每组按比例（四舍五入）划分后的 Split，各部分下标升序
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ArgumentError(f"划分比例必须是三个非负数且和为 1: {fractions}")
    if fractions[0] <= 0:
        raise ArgumentError("训练集比例必须为正")
    rng = rng if rng is not None else np.random.default_rng(0)
    parts_required = sum(1 for f in fractions if f > 0)

    train, validation, test = [], [], []
    for t in range(dataset.group_count):
        members = np.flatnonzero(dataset.group == t)
        if members.size == 0:
            continue
        members = rng.permutation(members)
        size = members.size
        if size < parts_required:
            logger.warning(f"第 {t} 组只有 {size} 个样本，少于划分份数 {parts_required}，全部放入训练集")
            train.append(members)
            continue
        n_val = _round_half_up(fractions[1] * size)
        n_test = _round_half_up(fractions[2] * size)
        # 每组至少保留一个训练样本
        while size - n_val - n_test < 1:
            if n_val >= n_test and n_val > 0:
                n_val -= 1
            else:
                n_test -= 1
        n_train = size - n_val - n_test
        train.append(members[:n_train])
        validation.append(members[n_train:n_train + n_val])
        test.append(members[n_train + n_val:])

    def _join(chunks):
        if not chunks:
            return np.zeros(0, dtype=np.int64)
        return np.sort(np.concatenate(chunks)).astype(np.int64)

    split = Split(train=_join(train), validation=_join(validation), test=_join(test))
    split.check(dataset.n)
    return split


@dataclass(frozen=True)
class Scaler:
    """按训练集均值/标准差做标准化，可逆"""

    x_mean: NDArray[np.float64]
    x_std: NDArray[np.float64]
    y_mean: float
    y_std: float

    @classmethod
    def identity(cls, d: int) -> "Scaler":
        return cls(x_mean=np.zeros(d), x_std=np.ones(d), y_mean=0.0, y_std=1.0)

    def transform_covariates(self, x: NDArray) -> NDArray:
        return (np.asarray(x, dtype=np.float64) - self.x_mean) / self.x_std

    def inverse_covariates(self, x: NDArray) -> NDArray:
        return np.asarray(x, dtype=np.float64) * self.x_std + self.x_mean

    def transform_outcome(self, y: NDArray) -> NDArray:
        return (np.asarray(y, dtype=np.float64) - self.y_mean) / self.y_std

    def inverse_outcome(self, y: NDArray) -> NDArray:
        return np.asarray(y, dtype=np.float64) * self.y_std + self.y_mean

    def apply(self, dataset: Dataset) -> Dataset:
        return self._map(dataset, self.transform_covariates, self.transform_outcome)

    def invert(self, dataset: Dataset) -> Dataset:
        return self._map(dataset, self.inverse_covariates, self.inverse_outcome)

    @staticmethod
    def _map(dataset: Dataset, fx, fy) -> Dataset:
        return replace(
            dataset,
            covariates=fx(dataset.covariates),
            factual_outcome=fy(dataset.factual_outcome),
            potential_outcomes=None if dataset.potential_outcomes is None else fy(dataset.potential_outcomes),
            noiseless_outcomes=None if dataset.noiseless_outcomes is None else fy(dataset.noiseless_outcomes),
        )

    def to_dict(self) -> dict:
        return {
            "x_mean": self.x_mean.tolist(),
            "x_std": self.x_std.tolist(),
            "y_mean": float(self.y_mean),
            "y_std": float(self.y_std),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Scaler":
        return cls(
            x_mean=np.asarray(data["x_mean"], dtype=np.float64),
            x_std=np.asarray(data["x_std"], dtype=np.float64),
            y_mean=float(data["y_mean"]),
            y_std=float(data["y_std"]),
        )


def standardize(dataset: Dataset, split: Split) -> Tuple[Dataset, Scaler]:
    """
    用训练集统计量标准化协变量与结果

    Returns:
        (标准化后的数据集, 可逆的 Scaler)；标准差下限为 1e-8
    """
    if split.train.size == 0:
        raise ArgumentError("训练集为空，无法计算标准化统计量")
    x_train = dataset.covariates[split.train]
    y_train = dataset.factual_outcome[split.train]
    scaler = Scaler(
        x_mean=x_train.mean(axis=0),
        x_std=np.maximum(x_train.std(axis=0), STD_FLOOR),
        y_mean=float(y_train.mean()),
        y_std=float(max(y_train.std(), STD_FLOOR)),
    )
    return scaler.apply(dataset), scaler


def factual_matrix(dataset: Dataset) -> NDArray[np.float64]:
    """只填入事实结果的 n × k 矩阵，其余单元为 NaN"""
    matrix = np.full((dataset.n, dataset.group_count), np.nan)
    matrix[np.arange(dataset.n), dataset.group] = dataset.factual_outcome
    return matrix
