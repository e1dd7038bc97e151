"""Tensor type, differentiable primitives, and reverse-mode gradients."""

from .autodiff import (
    GradCheckReport,
    global_grad_norm,
    global_norm_clip,
    gradient_check,
    reverse_sweep,
)
from .params import AdamSlots, ParamStore, embedding_init, glorot_uniform
from .tensor import (
    CHECK_DTYPE,
    TRAIN_DTYPE,
    Tape,
    Tensor,
    active_tape,
    constant,
    ones,
    recording,
    zeros,
)
from . import ops

__all__ = [
    "AdamSlots",
    "CHECK_DTYPE",
    "GradCheckReport",
    "ParamStore",
    "Tape",
    "Tensor",
    "TRAIN_DTYPE",
    "active_tape",
    "constant",
    "embedding_init",
    "global_grad_norm",
    "global_norm_clip",
    "glorot_uniform",
    "gradient_check",
    "ones",
    "ops",
    "recording",
    "reverse_sweep",
    "zeros",
]
