from .functional import (
    batch_norm,
    conv2d,
    cross_entropy,
    linear,
    log_softmax,
    max_pool,
    reverse_gradient,
    softmax,
)
from .gradcheck import finite_difference_check
from .layers import (
    BatchNorm2d,
    Conv2d,
    ConvBlock,
    Flatten,
    GradientReversal,
    Linear,
    MaxPool,
    Module,
    ReLU,
    Sequential,
)
from .optim import Adam, AdamState, adam_step
from .tensor import Tensor, check_finite, no_grad, relu

__all__ = [
    "Adam",
    "AdamState",
    "BatchNorm2d",
    "Conv2d",
    "ConvBlock",
    "Flatten",
    "GradientReversal",
    "Linear",
    "MaxPool",
    "Module",
    "ReLU",
    "Sequential",
    "Tensor",
    "adam_step",
    "batch_norm",
    "check_finite",
    "conv2d",
    "cross_entropy",
    "finite_difference_check",
    "linear",
    "log_softmax",
    "max_pool",
    "no_grad",
    "relu",
    "reverse_gradient",
    "softmax",
]
