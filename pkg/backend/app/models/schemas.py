import itertools
import math
from typing import Any, Dict, Iterator, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from app.errors import ConfigError

# 超参数搜索范围
BETA_GRID = [0.0] + [10.0 ** c for c in range(-6, 3)]
PENALTY_GRID = [0.0] + [10.0 ** c for c in range(-6, 0)]
LAYER_GRID = [2, 3, 4, 5]
WIDTH_GRID = [50, 100, 150]
UNITS_PER_GROUP_GRID = [50, 75, 100]

ERROR_METRIC_PREFIXES = ("pehe", "sqrt_pehe", "ate", "mpehe", "sqrt_mpehe", "mate", "mse")


def build_config(model_cls, **values):
    """构造配置模型，把 pydantic 校验错误转换为 ConfigError"""
    try:
        return model_cls(**values)
    except ValidationError as e:
        raise ConfigError(f"{model_cls.__name__} 配置非法: {e}") from e


class TrainConfig(BaseModel):
    """对抗训练配置"""

    model_config = ConfigDict(populate_by_name=True, extra="forbid")

    beta: float = Field(1e-2, ge=0.0)
    lam: float = Field(1e-4, ge=0.0, alias="lambda")
    alpha: float = Field(1e-4, ge=0.0)
    layers: int = Field(3, ge=1)
    width: int = Field(100, ge=1)
    units_per_group: int = Field(50, ge=1)
    generator_steps: int = Field(3, ge=1)
    max_epochs: int = Field(1000, ge=0)
    patience: int = Field(30, ge=1)
    warmup_epochs: int = Field(0, ge=0)
    learning_rate: float = Field(1e-3, gt=0.0)
    adam_beta1: float = Field(0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_epsilon: float = Field(1e-8, gt=0.0)
    dropout_rate: float = Field(0.1, ge=0.0, lt=1.0)
    feature_selection: bool = True
    split_fractions: Tuple[float, float, float] = (0.63, 0.27, 0.10)
    seed: int = 0

    def updated(self, **values) -> "TrainConfig":
        """覆盖部分字段并重新校验"""
        try:
            return TrainConfig.model_validate({**self.model_dump(), **values})
        except ValidationError as e:
            raise ConfigError(f"TrainConfig 配置非法: {e}") from e

    @field_validator("split_fractions")
    @classmethod
    def _check_fractions(cls, value):
        if any(f < 0 for f in value) or not math.isclose(sum(value), 1.0, abs_tol=1e-9):
            raise ValueError(f"划分比例必须非负且和为 1: {value}")
        if value[0] <= 0:
            raise ValueError("训练集比例必须为正")
        return value


class CorrelationSpec(BaseModel):
    """hub-Toeplitz 相关矩阵参数"""

    model_config = ConfigDict(extra="forbid")

    block_dims: List[int]
    rho_max: float = 0.5
    rho_min: float = 0.1
    gamma: float = Field(1.0, gt=0.0)
    cross_block_delta: float = Field(0.0, ge=0.0)

    @field_validator("block_dims")
    @classmethod
    def _check_dims(cls, value):
        if not value or any(d < 2 for d in value):
            raise ValueError(f"每个块维度至少为 2: {value}")
        return value

    @model_validator(mode="after")
    def _check_rho(self):
        if not 0.0 <= self.rho_min <= self.rho_max < 1.0:
            raise ValueError(
                f"需要 0 ≤ rho_min ≤ rho_max < 1，实际 rho_min={self.rho_min}, rho_max={self.rho_max}"
            )
        return self

    @property
    def dim(self) -> int:
        return sum(self.block_dims)


class SynthConfig(BaseModel):
    """合成篮子试验数据配置"""

    model_config = ConfigDict(extra="forbid")

    group_count: int = Field(2, ge=1)
    units_per_group: List[int]
    spec: CorrelationSpec
    mean_shifts: List[List[float]]
    outcome_seed: int = 0
    covariate_seed: int = 1

    @field_validator("units_per_group", mode="before")
    @classmethod
    def _broadcast_units(cls, value, info):
        if isinstance(value, int):
            return [value] * info.data.get("group_count", 1)
        return value

    @model_validator(mode="after")
    def _check_shapes(self):
        if len(self.units_per_group) != self.group_count:
            raise ValueError(f"units_per_group 长度必须等于 K={self.group_count}")
        if any(n < 0 for n in self.units_per_group):
            raise ValueError("每组样本量必须非负")
        if len(self.spec.block_dims) != self.group_count:
            raise ValueError(f"block_dims 长度必须等于 K={self.group_count}")
        if len(self.mean_shifts) != self.group_count:
            raise ValueError(f"mean_shifts 长度必须等于 K={self.group_count}")
        d = self.spec.dim
        for k, shift in enumerate(self.mean_shifts):
            if len(shift) != d:
                raise ValueError(f"第 {k} 组均值向量长度 {len(shift)} 与 d={d} 不一致")
        return self

    @classmethod
    def basket(
        cls,
        groups: int = 2,
        units: int = 500,
        block_dim: int = 10,
        bias: float = 0.0,
        seed: int = 0,
        rho_max: float = 0.5,
        rho_min: float = 0.1,
        gamma: float = 1.0,
        cross_block_delta: float = 0.0
    ) -> "SynthConfig":
        """
        常用配置：第 0 组均值为 0，其余各组均值为 bias·1

        Args:
            groups: 肿瘤类型数 K
            units: 每组样本量 n_k
            block_dim: 每组预测变量块维度 d_k
            bias: 均值偏移 c，控制选择偏倚
            seed: 结果权重种子，协变量种子取 seed+1
        """
        d = groups * block_dim
        spec = build_config(
            CorrelationSpec,
            block_dims=[block_dim] * groups,
            rho_max=rho_max,
            rho_min=rho_min,
            gamma=gamma,
            cross_block_delta=cross_block_delta,
        )
        shifts = [[0.0] * d] + [[float(bias)] * d for _ in range(groups - 1)]
        return build_config(
            cls,
            group_count=groups,
            units_per_group=[units] * groups,
            spec=spec,
            mean_shifts=shifts,
            outcome_seed=seed,
            covariate_seed=seed + 1,
        )


class KnnConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    neighbor_count: int = Field(5, ge=1)
    distance: Literal["euclidean"] = "euclidean"
    standardize_inputs: bool = True


class TableSchema(BaseModel):
    """分隔文本表格的列定义"""

    model_config = ConfigDict(extra="forbid")

    covariate_columns: List[str] = Field(default_factory=list)  # 为空时取其余全部列
    group_column: str = "group"
    outcome_column: str = "y_factual"
    potential_outcome_columns: Optional[List[str]] = None
    noiseless_columns: Optional[List[str]] = None
    delimiter: str = ","

    @model_validator(mode="after")
    def _check_disjoint(self):
        named = list(self.covariate_columns) + [self.group_column, self.outcome_column]
        named += self.potential_outcome_columns or []
        named += self.noiseless_columns or []
        if len(named) != len(set(named)):
            raise ValueError(f"列名必须互不相同: {named}")
        return self

    def reserved_columns(self) -> List[str]:
        return (
            [self.group_column, self.outcome_column]
            + (self.potential_outcome_columns or [])
            + (self.noiseless_columns or [])
        )


class MetricsReport(BaseModel):
    """一次评估的指标及元数据"""

    dataset_id: str
    model_id: str
    replicate: int = 0
    seed: Optional[int] = None
    metrics: Dict[str, float] = Field(default_factory=dict)
    metadata: Dict[str, str] = Field(default_factory=dict)

    @field_validator("metrics")
    @classmethod
    def _check_values(cls, value):
        for name, v in value.items():
            if not math.isfinite(v):
                raise ValueError(f"指标 {name} 非有限: {v}")
            if name.startswith(ERROR_METRIC_PREFIXES) and v < 0:
                raise ValueError(f"误差指标 {name} 不能为负: {v}")
        return value


class RunManifest(BaseModel):
    """命令运行清单，足以复现整次运行"""

    command: str
    argv: List[str]
    config: Dict[str, Any] = Field(default_factory=dict)
    seeds: Dict[str, int] = Field(default_factory=dict)
    inputs: Dict[str, str] = Field(default_factory=dict)
    outputs: Dict[str, str] = Field(default_factory=dict)
    version: str
    started_at: str
    elapsed_seconds: float = 0.0


class SweepGrid(BaseModel):
    """超参数网格，默认即完整搜索范围"""

    model_config = ConfigDict(extra="forbid")

    beta: List[float] = Field(default_factory=lambda: list(BETA_GRID))
    lam: List[float] = Field(default_factory=lambda: list(PENALTY_GRID))
    alpha: List[float] = Field(default_factory=lambda: list(PENALTY_GRID))
    layers: List[int] = Field(default_factory=lambda: list(LAYER_GRID))
    width: List[int] = Field(default_factory=lambda: list(WIDTH_GRID))
    units_per_group: List[int] = Field(default_factory=lambda: list(UNITS_PER_GROUP_GRID))

    @model_validator(mode="after")
    def _check_non_empty(self):
        for name in ("beta", "lam", "alpha", "layers", "width", "units_per_group"):
            if not getattr(self, name):
                raise ValueError(f"网格维度 {name} 不能为空")
        return self

    def size(self) -> int:
        return (
            len(self.beta) * len(self.lam) * len(self.alpha)
            * len(self.layers) * len(self.width) * len(self.units_per_group)
        )

    def cells(self, base: TrainConfig) -> Iterator[TrainConfig]:
        """按固定顺序遍历网格，每个格点覆盖 base 中的对应字段"""
        for beta, lam, alpha, layers, width, m in itertools.product(
            self.beta, self.lam, self.alpha, self.layers, self.width, self.units_per_group
        ):
            yield base.updated(beta=beta, lam=lam, alpha=alpha, layers=layers, width=width, units_per_group=m)


class ArchiveMeta(BaseModel):
    """模型存档中除参数外的自描述信息"""

    architecture: Dict[str, Any]
    config: Dict[str, Any]
    scaler: Dict[str, Any]
    seed: int
    dataset_fingerprint: str = ""
    schema_fingerprint: str = ""
    split: Optional[Dict[str, List[int]]] = None
    feature_names: Optional[List[str]] = None
    group_labels: Optional[List[str]] = None
