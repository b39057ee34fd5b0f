from .basket import SyntheticDataset, basket_outcomes, generate_basket_dataset
from .correlation import (
    CORRELATION_PRESETS,
    assemble_correlation,
    correlation_preset,
    gaussian_kl,
    hub_toeplitz_block,
    safe_cross_block_delta,
    sample_mvn,
    symmetric_kl,
)

__all__ = [
    "CORRELATION_PRESETS",
    "SyntheticDataset",
    "assemble_correlation",
    "basket_outcomes",
    "correlation_preset",
    "gaussian_kl",
    "generate_basket_dataset",
    "hub_toeplitz_block",
    "safe_cross_block_delta",
    "sample_mvn",
    "symmetric_kl",
]
