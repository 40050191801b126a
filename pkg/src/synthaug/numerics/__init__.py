"""Tensor algebra, layers, reverse-mode autodiff and Adam."""

from .io import CheckpointFormatError, load_tensors, save_tensors
from .ops import (
    apply_activation,
    batch_norm,
    compute_loss,
    concat,
    conv2d,
    conv_transpose2d,
    dense,
    dropout,
    embed,
    flatten,
    pool,
    reshape,
)
from .optim import AdamState, TrainingDivergedError, adam_step
from .params import ParamSet
from .tensor import GradTape, ShapeError, Tensor, backward

__all__ = [
    "AdamState", "CheckpointFormatError", "GradTape", "ParamSet", "ShapeError", "Tensor",
    "TrainingDivergedError",
    "adam_step", "apply_activation", "backward", "batch_norm", "compute_loss", "concat",
    "conv2d", "conv_transpose2d", "dense", "dropout", "embed", "flatten", "load_tensors",
    "pool", "reshape", "save_tensors",
]
