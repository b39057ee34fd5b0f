from .baselines import knn_impute, mean_impute
from .metrics import (
    ate_error,
    mse_potential,
    multi_metric,
    pehe,
    reports_to_frame,
    summarize_reports,
    tgor,
    tgor_borrowed,
)

__all__ = [
    "ate_error",
    "knn_impute",
    "mean_impute",
    "mse_potential",
    "multi_metric",
    "pehe",
    "reports_to_frame",
    "summarize_reports",
    "tgor",
    "tgor_borrowed",
]
