from .tensor import (
    RankError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    broadcast_to,
    clip,
    concat,
    conv2d_3x3,
    div,
    exp,
    getitem,
    l2_normalize,
    leaky_relu,
    log,
    log_softmax,
    logsumexp,
    matmul,
    max_,
    max_pool_over_points,
    mean,
    minimum,
    mul,
    no_grad,
    pad2d,
    precision,
    relu,
    reshape,
    sigmoid,
    softmax,
    softplus,
    sparse_matmul,
    sqrt,
    square,
    sub,
    sum_,
    take_rows,
    transpose,
)
from .optim import (
    CheckpointError,
    ParameterStore,
    adam_step,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from .nn import MLP, Conv3x3, Linear
