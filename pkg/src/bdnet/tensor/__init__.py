"""Minimal dense tensor engine with reverse-mode differentiation."""

from .core import (
    DEFAULT_DTYPE,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    concat,
    is_grad_enabled,
    mul,
    no_grad,
    note_branch,
    record_branches,
    reshape,
    tensor_sum,
)
from .functional import (
    activation,
    adaptive_avg_pool2d,
    batch_norm,
    bilinear_resize,
    conv2d,
    depthwise_conv2d,
    log_softmax_channel,
    point_indices,
    relu,
    relu6,
    resize_matrix,
    sample_points_bilinear,
    scatter_points,
    softmax_channel,
    take_channel,
)
from .gradcheck import GradcheckResult, gradcheck
from .threads import set_num_threads, thread_limit

__all__ = [
    "DEFAULT_DTYPE",
    "GradcheckResult",
    "ShapeError",
    "Tensor",
    "activation",
    "adaptive_avg_pool2d",
    "add",
    "as_tensor",
    "batch_norm",
    "bilinear_resize",
    "concat",
    "conv2d",
    "depthwise_conv2d",
    "gradcheck",
    "is_grad_enabled",
    "log_softmax_channel",
    "mul",
    "no_grad",
    "note_branch",
    "point_indices",
    "record_branches",
    "relu",
    "relu6",
    "reshape",
    "resize_matrix",
    "sample_points_bilinear",
    "scatter_points",
    "set_num_threads",
    "softmax_channel",
    "take_channel",
    "tensor_sum",
    "thread_limit",
]
