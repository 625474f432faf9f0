from .tensor import (
    DTYPE,
    Tensor,
    as_tensor,
    concat,
    cosine_sim,
    cross_entropy,
    exp,
    getitem,
    l2_normalize,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    one_hot,
    parameters_checksum,
    quick_gelu,
    reshape,
    sigmoid,
    softmax,
    sqrt,
    stack,
    take_rows,
    tanh,
    transpose,
    tsum,
)
from .optim import Adam, AdamState, LrSchedule, adam_step
from .gradcheck import check_gradients, relative_error
