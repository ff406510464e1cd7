from . import ops
from .ops import forward_op_catalogue
from .optim import SgdConfig, lr_schedule, sgd_step
from .rng import Rng, derive
from .tensor import GraphError, Parameter, ShapeError, Tensor, backward, grad_enabled, no_grad

__all__ = [
    "ops", "forward_op_catalogue", "SgdConfig", "lr_schedule", "sgd_step", "Rng", "derive",
    "GraphError", "Parameter", "ShapeError", "Tensor", "backward", "grad_enabled", "no_grad",
]
