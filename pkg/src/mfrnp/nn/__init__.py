from mfrnp.nn.autodiff import Tensor, grad, parameter
from mfrnp.nn.dense import DenseNet, net_forward
from mfrnp.nn.optim import AdamState, adam_step, clip_by_global_norm, lr_schedule

__all__ = [
    "AdamState",
    "DenseNet",
    "Tensor",
    "adam_step",
    "clip_by_global_norm",
    "grad",
    "lr_schedule",
    "net_forward",
    "parameter",
]
