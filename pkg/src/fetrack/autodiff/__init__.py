"""Minimal float64 tensor engine with reverse-mode differentiation."""

from . import functional
from .checkpoint import load_checkpoint, save_checkpoint
from .functional import (
    adaptive_avg_pool_1x1,
    avg_pool2d,
    batch_norm,
    conv2d,
    linear,
    max_pool2d,
    region_pool,
)
from .gradcheck import GradCheckReport, grad_check, relative_error
from .nn import BatchNorm2d, Conv2d, ConvBNReLU, Linear, Module, Parameter
from .optim import Adam
from .tensor import (
    Tensor,
    add,
    as_tensor,
    concat,
    div,
    exp,
    grad_enabled,
    mean,
    mul,
    no_grad,
    pad2d,
    relu,
    reshape,
    scale,
    sigmoid,
    sqrt,
    square,
    sub,
    take,
    transpose,
    tsum,
)
