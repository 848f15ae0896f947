"""Minimal reverse-mode automatic differentiation over float64 arrays."""

from .losses import ce_iou_parts, loss_ce_iou, loss_softmax_ce
from .ops import (
    add,
    bias_add,
    concat,
    conv2d,
    matmul,
    max_pool2d,
    mul,
    relu,
    reshape,
    sigmoid,
    sub,
    total,
    upsample2d,
)
from .optim import Adam, adam_step, sgd_step
from .tensor import ShapeError, Tape, Tensor, active_tape, backward

__all__ = [
    "Adam",
    "ShapeError",
    "Tape",
    "Tensor",
    "active_tape",
    "adam_step",
    "add",
    "backward",
    "bias_add",
    "ce_iou_parts",
    "concat",
    "conv2d",
    "loss_ce_iou",
    "loss_softmax_ce",
    "matmul",
    "max_pool2d",
    "mul",
    "relu",
    "reshape",
    "sgd_step",
    "sigmoid",
    "sub",
    "total",
    "upsample2d",
]
