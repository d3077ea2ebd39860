from . import tensor as ops
from .optim import AdamState, adam_step
from .random import Rng
from .tensor import (
    ShapeError,
    Tape,
    Tensor,
    as_tensor,
    backward,
    check_mode,
    get_dtype,
    grad,
    grad_enabled,
    no_grad,
    parameter,
    set_debug,
    set_grad_enabled,
)

__all__ = [
    "AdamState",
    "Rng",
    "ShapeError",
    "Tape",
    "Tensor",
    "adam_step",
    "as_tensor",
    "backward",
    "check_mode",
    "get_dtype",
    "grad",
    "grad_enabled",
    "no_grad",
    "ops",
    "parameter",
    "set_debug",
    "set_grad_enabled",
]
