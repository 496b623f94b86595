"""Minimal reverse-mode autodiff engine and volumetric kernels."""
from . import backend
from .autograd import (
    LOG_FLOOR,
    GradientError,
    Tape,
    Tensor,
    active_tape,
    as_tensor,
    clamp,
    concat,
    exp,
    log,
    logsumexp,
    make_op,
    matmul,
    relu,
    reshape,
    softmax,
    sqrt,
    stack,
    take_rows,
    transpose,
)
from .losses import DICE_SMOOTH, cross_entropy, dice_ce_loss, mse, one_hot, soft_dice_loss
from .nn import conv3d, instance_norm, max_pool3d, softmax_channel, upsample3d
from .optim import SGD, poly_lr, ramp_up

__all__ = [
    "DICE_SMOOTH",
    "LOG_FLOOR",
    "GradientError",
    "SGD",
    "Tape",
    "Tensor",
    "active_tape",
    "as_tensor",
    "backend",
    "clamp",
    "concat",
    "conv3d",
    "cross_entropy",
    "dice_ce_loss",
    "exp",
    "instance_norm",
    "log",
    "logsumexp",
    "make_op",
    "matmul",
    "max_pool3d",
    "mse",
    "one_hot",
    "poly_lr",
    "ramp_up",
    "relu",
    "reshape",
    "soft_dice_loss",
    "softmax",
    "softmax_channel",
    "sqrt",
    "stack",
    "take_rows",
    "transpose",
    "upsample3d",
]
