"""Small reverse-mode autodiff engine with second-order products and optimizers."""

from . import tensor as ops
from .functional import HessianOperator, grad, hvp, mixed_vhp
from .optim import Adam, AdamState, RMSProp, RmsPropState, adam_step, rmsprop_step
from .tensor import NumericError, Var, as_var, gradients, no_grad

__all__ = [
    "ops",
    "Var",
    "NumericError",
    "as_var",
    "gradients",
    "no_grad",
    "grad",
    "hvp",
    "mixed_vhp",
    "HessianOperator",
    "AdamState",
    "RmsPropState",
    "adam_step",
    "rmsprop_step",
    "Adam",
    "RMSProp",
]
