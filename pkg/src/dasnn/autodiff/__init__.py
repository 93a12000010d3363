from .tensor import (
    NonFiniteError,
    Tape,
    Tensor,
    backward,
    no_record,
    set_finite_checks,
    tensor,
)
from .ops import (
    add,
    add_n,
    add_scalar,
    concat_channels,
    concat_channels_n,
    conv2d,
    cross_entropy_smoothed,
    detach,
    global_avgpool,
    linear,
    mean_all,
    mean_time,
    mul,
    repeat_time,
    reshape,
    scale,
    sub,
    sum_all,
)
from .batchnorm import BN_EPS, BN_MOMENTUM, BatchNormParams, batchnorm

__all__ = [
    "BN_EPS", "BN_MOMENTUM", "BatchNormParams", "NonFiniteError", "Tape", "Tensor",
    "add", "add_n", "add_scalar", "backward", "batchnorm", "concat_channels",
    "concat_channels_n", "conv2d", "cross_entropy_smoothed", "detach", "global_avgpool",
    "linear", "mean_all", "mean_time", "mul", "no_record", "repeat_time", "reshape",
    "scale", "set_finite_checks", "sub", "sum_all", "tensor",
]
