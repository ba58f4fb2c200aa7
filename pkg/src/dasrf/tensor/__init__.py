from dasrf.tensor.core import (
    Tape,
    Tensor,
    active_tape,
    as_tensor,
    backward,
    get_dtype,
    grad_of,
    no_grad,
    precision,
    record,
    set_precision,
)
from dasrf.tensor.layers import LayerSpec, conv2d
from dasrf.tensor.optim import SGD, Adam, sgd_step

__all__ = [
    "Adam",
    "LayerSpec",
    "SGD",
    "Tape",
    "Tensor",
    "active_tape",
    "as_tensor",
    "backward",
    "conv2d",
    "get_dtype",
    "grad_of",
    "no_grad",
    "precision",
    "record",
    "set_precision",
    "sgd_step",
]
