from .optim import OptimizerState, optimizer_step
from .params import ParameterSet
from .rng import ItemStream, derive_seed, seeded_rng
from .tensor import (
    Tensor,
    add,
    as_tensor,
    concat,
    conv2d,
    is_grad_enabled,
    log_softmax,
    log_softmax_np,
    matmul,
    max_pool2d,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    scale,
    softmax_np,
    square,
    sub,
    transpose,
    tsum,
)

__all__ = [
    "ItemStream",
    "OptimizerState",
    "ParameterSet",
    "Tensor",
    "add",
    "as_tensor",
    "concat",
    "conv2d",
    "derive_seed",
    "is_grad_enabled",
    "log_softmax",
    "log_softmax_np",
    "matmul",
    "max_pool2d",
    "mean",
    "mul",
    "no_grad",
    "optimizer_step",
    "relu",
    "reshape",
    "scale",
    "seeded_rng",
    "softmax_np",
    "square",
    "sub",
    "transpose",
    "tsum",
]
