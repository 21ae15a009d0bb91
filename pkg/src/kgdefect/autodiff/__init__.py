from . import primitives as P
from .gradcheck import finite_difference_gradient, graph_gradient_error, random_graph, relative_error
from .primitives import bilinear_matrix
from .tensor import (
    PRIMITIVES,
    GradientSet,
    NumericFault,
    ShapeError,
    Tape,
    Tensor,
    active_tape,
    as_tensor,
    backward,
    default_dtype,
    forward_primitive,
    no_tape,
    precision,
    stop_gradient,
)

__all__ = [
    "P",
    "PRIMITIVES",
    "GradientSet",
    "NumericFault",
    "ShapeError",
    "Tape",
    "Tensor",
    "active_tape",
    "as_tensor",
    "backward",
    "bilinear_matrix",
    "default_dtype",
    "finite_difference_gradient",
    "graph_gradient_error",
    "forward_primitive",
    "no_tape",
    "precision",
    "random_graph",
    "relative_error",
    "stop_gradient",
]
