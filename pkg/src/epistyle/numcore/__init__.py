from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import grad_check
from .optim import AdamState, PlateauScheduler, adam_step, clip_global_norm
from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat,
    cross_entropy,
    dropout,
    embedding_lookup,
    exp,
    l2_normalize,
    layer_norm,
    linear,
    log,
    matmul,
    max_over_time,
    mean,
    mul,
    multihead_attention,
    relu,
    reshape,
    scale,
    scatter_rows,
    sliding_window_conv,
    softmax,
    sqrt,
    sub,
    sum_,
    transpose,
)

__all__ = [
    "AdamState",
    "PlateauScheduler",
    "ShapeError",
    "Tensor",
    "adam_step",
    "add",
    "clip_global_norm",
    "concat",
    "cross_entropy",
    "dropout",
    "embedding_lookup",
    "exp",
    "grad_check",
    "l2_normalize",
    "layer_norm",
    "linear",
    "load_checkpoint",
    "log",
    "matmul",
    "max_over_time",
    "mean",
    "mul",
    "multihead_attention",
    "relu",
    "reshape",
    "save_checkpoint",
    "scale",
    "scatter_rows",
    "sliding_window_conv",
    "softmax",
    "sqrt",
    "sub",
    "sum_",
    "transpose",
]
