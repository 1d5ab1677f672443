"""Minimal tensor/autodiff stack sized for the histogram encoder."""

from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import gradient_check
from .losses import triplet_loss, triplet_loss_batch
from .optim import AdamW
from .tensor import (
    Tensor,
    add,
    as_tensor,
    concat,
    conv1d,
    l2_normalize,
    linear,
    matmul,
    mul,
    relu,
    reshape,
    sub,
    take_rows,
    tmean,
    tsum,
)

__all__ = [
    "AdamW",
    "Tensor",
    "add",
    "as_tensor",
    "concat",
    "conv1d",
    "gradient_check",
    "l2_normalize",
    "linear",
    "load_checkpoint",
    "matmul",
    "mul",
    "relu",
    "reshape",
    "save_checkpoint",
    "sub",
    "take_rows",
    "tmean",
    "triplet_loss",
    "triplet_loss_batch",
    "tsum",
]
