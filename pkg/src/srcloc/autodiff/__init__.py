"""A small reverse-mode differentiation engine on numpy arrays."""

from . import losses, ops
from .optim import AdamState, adam_step
from .params import ParamStore, load_params, save_params
from .tensor import Tensor

__all__ = ["Tensor", "ParamStore", "AdamState", "adam_step", "ops", "losses",
           "save_params", "load_params"]
