from .engine import (
    Array,
    ShapeError,
    TapeError,
    abs_,
    add,
    as_array,
    backward,
    concat,
    constant,
    conv1d,
    depthwise_conv1d,
    div,
    exp,
    gelu,
    getitem,
    layer_norm,
    log,
    logsumexp,
    masked_fill,
    matmul,
    maximum,
    mean,
    minimum,
    mul,
    neg,
    power,
    relu,
    reshape,
    scaled_dot_attention,
    sigmoid,
    slice_,
    softmax,
    softplus,
    sqrt,
    stack,
    sub,
    sum_,
    take,
    tanh,
    transpose,
)
from .gradcheck import check_gradients, numeric_grad, relative_error
from .optim import AdamState, NumericalError, adam_step, lr_multiplier

__all__ = [name for name in dir() if not name.startswith("_")]
