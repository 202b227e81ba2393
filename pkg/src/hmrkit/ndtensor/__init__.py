from .functional import (
    ConfigurationError,
    avg_pool2d,
    conv2d,
    layer_norm,
    linear,
    masked_softmax,
    matmul,
    softmax,
    upsample_nearest2d,
)
from .gradcheck import check_gradients, numerical_gradient, relative_error
from .optim import Adam, AdamState, OptimizerError, adam_step
from .tensor import (
    ContractError,
    DimensionError,
    Tensor,
    as_tensor,
    broadcast_to,
    concat,
    default_dtype,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
    set_default_dtype,
    stack,
)

__all__ = [
    "Adam",
    "AdamState",
    "ConfigurationError",
    "ContractError",
    "DimensionError",
    "OptimizerError",
    "Tensor",
    "adam_step",
    "as_tensor",
    "avg_pool2d",
    "broadcast_to",
    "check_gradients",
    "concat",
    "conv2d",
    "default_dtype",
    "get_default_dtype",
    "is_grad_enabled",
    "layer_norm",
    "linear",
    "masked_softmax",
    "matmul",
    "no_grad",
    "numerical_gradient",
    "relative_error",
    "set_default_dtype",
    "softmax",
    "stack",
    "upsample_nearest2d",
]
