from .gradcheck import finite_diff_gradients, relative_errors
from .layers import DenseLayer, OneToOneLayer, dropout_mask
from .optim import AdamState, adam_proximal_l1, adam_step
from .penalties import elastic_net
from .tensor import GradientBundle, Tensor2, add_bundles, as_tensor2

__all__ = [
    "AdamState",
    "DenseLayer",
    "GradientBundle",
    "OneToOneLayer",
    "Tensor2",
    "adam_proximal_l1",
    "adam_step",
    "add_bundles",
    "as_tensor2",
    "dropout_mask",
    "elastic_net",
    "finite_diff_gradients",
    "relative_errors",
]
