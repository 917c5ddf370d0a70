"""Minimal eager autodiff on numpy arrays."""

from . import ops
from .gradcheck import finite_diff_grad
from .tensor import (
    BackwardError,
    GraphError,
    Parameter,
    ShapeError,
    Tensor,
    UnboundInputError,
    as_tensor,
    backward,
    forward,
    gradients_for,
    no_grad,
)

__all__ = [
    "BackwardError", "GraphError", "Parameter", "ShapeError", "Tensor", "UnboundInputError",
    "as_tensor", "backward", "finite_diff_grad", "forward", "gradients_for", "no_grad", "ops",
]
