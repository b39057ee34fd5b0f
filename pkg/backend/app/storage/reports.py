import json
import logging
import math
from pathlib import Path
from typing import Iterable, Literal, Optional, Union

import numpy as np
import pandas as pd

from app.errors import DataIOError
from app.evaluation.metrics import REPORT_COLUMNS, reports_to_frame
from app.models.schemas import MetricsReport

logger = logging.getLogger(__name__)

ReportFormat = Literal["csv", "json"]


def _format_of(path: Path, fmt: Optional[str]) -> str:
    fmt = fmt or path.suffix.lstrip(".").lower() or "csv"
    if fmt not in ("csv", "json"):
        raise DataIOError(f"不支持的报告格式: {fmt}（可选 csv, json）")
    return fmt


def _json_value(value):
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and math.isnan(value):
        return None
    return value


def write_table(frame: pd.DataFrame, path: Union[str, Path], fmt: Optional[str] = None) -> str:
    """
    把表格写为 CSV 或 JSON，列顺序与行顺序保持不变

    JSON 形如 {"columns": [...], "rows": [{...}, ...]}，空表同样保留列名。
    """
    path = Path(path)
    fmt = _format_of(path, fmt)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if fmt == "csv":
            frame.to_csv(path, index=False)
        else:
            rows = [
                {column: _json_value(value) for column, value in zip(frame.columns, record)}
                for record in frame.itertuples(index=False, name=None)
            ]
            payload = {"columns": [str(c) for c in frame.columns], "rows": rows}
            path.write_text(json.dumps(payload, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    except OSError as e:
        raise DataIOError(f"无法写入 {path}: {e}") from e
    return str(path)


def write_report(
    reports: Iterable[MetricsReport],
    path: Union[str, Path],
    fmt: Optional[ReportFormat] = None
) -> str:
    """
    每个 (数据集, 模型, 重复, 指标) 写一行

    Args:
        reports: 指标报告
        path: 输出路径
        fmt: csv 或 json；为空时按扩展名判断

    Returns:
        写出的路径
    """
    frame = reports_to_frame(list(reports))
    written = write_table(frame[REPORT_COLUMNS], path, fmt)
    logger.info(f"报告已写入 {written}（{len(frame)} 行）")
    return written
