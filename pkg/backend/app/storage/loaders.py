"""数据加载：IHDP 重复、通用多组数据表与合成运行目录"""

import hashlib
import json
import logging
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from app.errors import DataIOError
from app.models.dataset import Dataset, validate
from app.models.schemas import TableSchema
from app.synth.basket import SyntheticDataset

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

IHDP_FIXED_COLUMNS = ["treatment", "y_factual", "y_cfactual", "mu0", "mu1"]
IHDP_FILE_PATTERN = "ihdp_npci_{}.csv"
IHDP_NPZ_KEYS = ("x", "t", "yf", "ycf", "mu0", "mu1")

SYNTHETIC_DATASET_FILE = "dataset.csv"
SYNTHETIC_POTENTIAL_FILE = "potential_outcomes.csv"
SYNTHETIC_KL_FILE = "kl.csv"


def _numeric(frame: pd.DataFrame, source: PathLike) -> pd.DataFrame:
    """逐列转换为数值，遇到空值或非数值时报告行列位置"""
    out = {}
    for column in frame.columns:
        converted = pd.to_numeric(frame[column], errors="coerce")
        bad = np.flatnonzero(converted.isna().to_numpy())
        if bad.size:
            row = int(bad[0])
            raise DataIOError(
                f"{source}: 数据第 {row + 1} 行，列 {column!r} 不是有效数值: {frame[column].iloc[row]!r}"
            )
        out[column] = converted.astype(np.float64)
    return pd.DataFrame(out, index=frame.index)


def _read_csv(path: PathLike, **kwargs) -> pd.DataFrame:
    try:
        return pd.read_csv(path, dtype=str, keep_default_na=False, **kwargs)
    except FileNotFoundError as e:
        raise DataIOError(f"文件不存在: {path}") from e
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DataIOError(f"无法解析 {path}: {e}") from e


def _ihdp_from_columns(
    t: np.ndarray,
    yf: np.ndarray,
    ycf: np.ndarray,
    mu0: np.ndarray,
    mu1: np.ndarray,
    x: np.ndarray,
    source: str,
    replicate: int
) -> Dataset:
    if not np.all(np.isin(t, (0.0, 1.0))):
        row = int(np.flatnonzero(~np.isin(t, (0.0, 1.0)))[0])
        raise DataIOError(f"{source}: 数据第 {row + 1} 行 treatment 必须是 0 或 1，实际 {t[row]}")
    group = t.astype(np.int64)
    treated = group == 1
    potential = np.column_stack([np.where(treated, ycf, yf), np.where(treated, yf, ycf)])
    dataset = Dataset(
        covariates=x,
        group=group,
        factual_outcome=yf,
        group_count=2,
        potential_outcomes=potential,
        noiseless_outcomes=np.column_stack([mu0, mu1]),
        feature_names=tuple(f"x{j + 1}" for j in range(x.shape[1])),
        group_labels=("control", "treated"),
        name=f"ihdp-{replicate}",
    )
    validate(dataset)
    return dataset


def _ihdp_csv(path: Path, replicate: int) -> Dataset:
    raw = _read_csv(path, header=None)
    if raw.shape[1] < len(IHDP_FIXED_COLUMNS) + 1:
        raise DataIOError(f"{path}: IHDP 文件至少需要 {len(IHDP_FIXED_COLUMNS) + 1} 列，实际 {raw.shape[1]} 列")
    first = pd.to_numeric(raw.iloc[0], errors="coerce")
    if first.isna().all():
        raw = raw.iloc[1:].reset_index(drop=True)
    d = raw.shape[1] - len(IHDP_FIXED_COLUMNS)
    raw.columns = IHDP_FIXED_COLUMNS + [f"x{j + 1}" for j in range(d)]
    values = _numeric(raw, path)
    x = values[[f"x{j + 1}" for j in range(d)]].to_numpy()
    return _ihdp_from_columns(
        values["treatment"].to_numpy(),
        values["y_factual"].to_numpy(),
        values["y_cfactual"].to_numpy(),
        values["mu0"].to_numpy(),
        values["mu1"].to_numpy(),
        x,
        str(path),
        replicate,
    )


def _ihdp_npz(path: Path, replicate: int) -> Dataset:
    try:
        with np.load(path, allow_pickle=False) as archive:
            missing = [key for key in IHDP_NPZ_KEYS if key not in archive.files]
            if missing:
                raise DataIOError(f"{path}: 缺少数组 {missing}")
            arrays = {key: np.asarray(archive[key], dtype=np.float64) for key in IHDP_NPZ_KEYS}
    except (OSError, ValueError) as e:
        if isinstance(e, DataIOError):
            raise
        raise DataIOError(f"无法读取 {path}: {e}") from e
    x = arrays["x"]
    if x.ndim != 3:
        raise DataIOError(f"{path}: x 必须是 (n, d, R) 三维数组，实际形状 {x.shape}")
    replicates = x.shape[2]
    if not 0 <= replicate < replicates:
        raise DataIOError(f"{path}: 重复编号 {replicate} 超出 0..{replicates - 1}")
    columns = []
    for key in ("t", "yf", "ycf", "mu0", "mu1"):
        array = arrays[key]
        if array.shape != (x.shape[0], replicates):
            raise DataIOError(f"{path}: {key} 形状 {array.shape} 与 x 不一致，应为 {(x.shape[0], replicates)}")
        columns.append(array[:, replicate])
    return _ihdp_from_columns(*columns, x[:, :, replicate], str(path), replicate)


def load_ihdp(path: PathLike, replicate_index: int = 0) -> Dataset:
    """
    读取 IHDP 半合成基准的一个重复

    Args:
        path: 目录（内含 ihdp_npci_1.csv, ihdp_npci_2.csv, ...）、单个重复的 CSV 文件，
              或打包的 .npz 文件（x 形状 (n, d, R)，t/yf/ycf/mu0/mu1 形状 (n, R)）
        replicate_index: 从 0 开始的重复编号

    Returns:
        k=2 的数据集；潜在结果由事实/反事实列组成，mu0/mu1 保存为无噪声结果
    """
    path = Path(path)
    if replicate_index < 0:
        raise DataIOError(f"重复编号必须非负: {replicate_index}")
    if path.is_dir():
        target = path / IHDP_FILE_PATTERN.format(replicate_index + 1)
        if not target.exists():
            available = len(list(path.glob(IHDP_FILE_PATTERN.format("*"))))
            raise DataIOError(f"{path}: 没有第 {replicate_index} 个重复（找到 {available} 个重复文件）")
        return _ihdp_csv(target, replicate_index)
    if path.suffix == ".npz":
        return _ihdp_npz(path, replicate_index)
    if replicate_index != 0:
        raise DataIOError(f"{path} 是单个重复文件，只能读取重复 0，实际请求 {replicate_index}")
    return _ihdp_csv(path, replicate_index)


def _sorted_labels(values: Sequence[str]) -> List[str]:
    unique = sorted(set(values))
    try:
        return sorted(unique, key=lambda v: float(v))
    except ValueError:
        return unique


def load_table(path: PathLike, schema: TableSchema) -> Dataset:
    """
    按列定义读取带表头的分隔文本

    Args:
        path: 文件路径（UTF-8，'.' 作小数点）
        schema: 列定义；covariate_columns 为空时取除保留列外的全部列

    Returns:
        数据集；组标签排序后映射为 0..k-1，原标签记录在 group_labels（纯数字标签按数值排序）
    """
    frame = _read_csv(path, sep=schema.delimiter)
    reserved = schema.reserved_columns()
    covariates = list(schema.covariate_columns) or [c for c in frame.columns if c not in reserved]
    missing = [c for c in reserved + covariates if c not in frame.columns]
    if missing:
        raise DataIOError(f"{path}: 缺少列 {missing}")
    if not covariates:
        raise DataIOError(f"{path}: 没有协变量列")

    labels = frame[schema.group_column].str.strip()
    if (labels == "").any():
        row = int(np.flatnonzero((labels == "").to_numpy())[0])
        raise DataIOError(f"{path}: 数据第 {row + 1} 行，列 {schema.group_column!r} 为空")
    ordered = _sorted_labels(labels.tolist())
    mapping = {label: code for code, label in enumerate(ordered)}

    numeric = _numeric(frame[covariates + [schema.outcome_column]], path)
    potential = None
    if schema.potential_outcome_columns:
        potential = _numeric(frame[schema.potential_outcome_columns], path).to_numpy()
    noiseless = None
    if schema.noiseless_columns:
        noiseless = _numeric(frame[schema.noiseless_columns], path).to_numpy()

    dataset = Dataset(
        covariates=numeric[covariates].to_numpy(),
        group=labels.map(mapping).to_numpy(dtype=np.int64),
        factual_outcome=numeric[schema.outcome_column].to_numpy(),
        group_count=len(ordered),
        potential_outcomes=potential,
        noiseless_outcomes=noiseless,
        feature_names=tuple(covariates),
        group_labels=tuple(ordered),
        name=Path(path).stem,
    )
    validate(dataset)
    logger.info(f"读取 {path}: n={dataset.n}, d={dataset.d}, k={dataset.k}, 组映射 {mapping}")
    return dataset


def dataset_frame(dataset: Dataset) -> pd.DataFrame:
    """协变量、组标签与事实结果组成的表格"""
    names = list(dataset.feature_names or [f"x{j + 1}" for j in range(dataset.d)])
    frame = pd.DataFrame(dataset.covariates, columns=names)
    labels = dataset.group_labels or tuple(str(t) for t in range(dataset.group_count))
    frame["group"] = [labels[t] for t in dataset.group]
    frame["y_factual"] = dataset.factual_outcome
    return frame


def write_synthetic(synthetic: SyntheticDataset, run_dir: PathLike) -> Dict[str, str]:
    """
    写出合成数据：数据表、真实潜在结果表、KL 表

    Returns:
        输出文件名到路径的映射
    """
    run_dir = Path(run_dir)
    dataset = synthetic.dataset
    potential = pd.DataFrame(
        dataset.potential_outcomes, columns=[f"y{t}" for t in range(dataset.group_count)]
    )
    outputs = {
        "dataset": run_dir / SYNTHETIC_DATASET_FILE,
        "potential_outcomes": run_dir / SYNTHETIC_POTENTIAL_FILE,
        "kl": run_dir / SYNTHETIC_KL_FILE,
    }
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        dataset_frame(dataset).to_csv(outputs["dataset"], index=False)
        potential.to_csv(outputs["potential_outcomes"], index=False)
        synthetic.kl_table.to_csv(outputs["kl"], index=False)
    except OSError as e:
        raise DataIOError(f"无法写入 {run_dir}: {e}") from e
    return {name: str(p) for name, p in outputs.items()}


def load_synthetic(run_dir: PathLike) -> Dataset:
    """读取 write_synthetic 的输出，附带真实潜在结果"""
    run_dir = Path(run_dir)
    dataset = load_table(run_dir / SYNTHETIC_DATASET_FILE, TableSchema())
    potential_path = run_dir / SYNTHETIC_POTENTIAL_FILE
    if not potential_path.exists():
        return dataset
    potential = _numeric(_read_csv(potential_path), potential_path).to_numpy()
    loaded = replace(dataset, potential_outcomes=potential, name=run_dir.name or dataset.name)
    validate(loaded)
    return loaded


def load_dataset(path: PathLike, replicate_index: int = 0, schema: Optional[TableSchema] = None) -> Dataset:
    """按路径形态选择加载方式：合成运行目录、IHDP 目录/.npz，或普通表格"""
    path = Path(path)
    if path.is_dir() and (path / SYNTHETIC_DATASET_FILE).exists():
        return load_synthetic(path)
    if path.is_dir() or path.suffix == ".npz" or path.name.startswith("ihdp_npci"):
        return load_ihdp(path, replicate_index)
    return load_table(path, schema or TableSchema())


def dataset_fingerprint(dataset: Dataset) -> str:
    """协变量、组标签与事实结果内容的 sha256"""
    digest = hashlib.sha256()
    digest.update(f"{dataset.n}:{dataset.d}:{dataset.group_count}".encode())
    for array in (dataset.covariates, dataset.group, dataset.factual_outcome):
        digest.update(np.ascontiguousarray(array).tobytes())
    return digest.hexdigest()


def schema_fingerprint(dataset: Dataset) -> str:
    """维度、特征名与组标签的 sha256，用于发现列结构变化"""
    payload = {
        "d": dataset.d,
        "k": dataset.group_count,
        "feature_names": list(dataset.feature_names or []),
        "group_labels": list(dataset.group_labels or []),
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()
