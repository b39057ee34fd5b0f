from .archive import ARCHIVE_VERSION, LoadedModel, load_model, save_model
from .loaders import (
    dataset_fingerprint,
    load_dataset,
    load_ihdp,
    load_synthetic,
    load_table,
    schema_fingerprint,
    write_synthetic,
)
from .reports import write_report, write_table

__all__ = [
    "ARCHIVE_VERSION",
    "LoadedModel",
    "dataset_fingerprint",
    "load_dataset",
    "load_ihdp",
    "load_model",
    "load_synthetic",
    "load_table",
    "save_model",
    "schema_fingerprint",
    "write_report",
    "write_synthetic",
    "write_table",
]
