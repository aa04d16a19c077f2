from . import ops
from .gradcheck import grad_check
from .nn import BatchNorm, Linear, ParamSet, activation
from .ops import forward_op
from .optim import SGD, Adam, MissingGradError, MultiStepLR, make_optimizer
from .tensor import NonFiniteError, ShapeError, Tensor, backward, no_grad, set_debug

__all__ = [
    "Adam",
    "BatchNorm",
    "Linear",
    "MissingGradError",
    "MultiStepLR",
    "NonFiniteError",
    "ParamSet",
    "SGD",
    "ShapeError",
    "Tensor",
    "activation",
    "backward",
    "forward_op",
    "grad_check",
    "make_optimizer",
    "no_grad",
    "ops",
    "set_debug",
]
