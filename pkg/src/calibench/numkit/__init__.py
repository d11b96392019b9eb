"""Minimal float64 tensor kernel with reverse-mode autodiff and optimizers."""
from . import ops
from .gradcheck import grad_check
from .optim import OptimizerState, adam, optimizer_step, poly_lr, sgd
from .rng import derive_seed, generator, splitmix64
from .tensor import ConfigError, ContractError, Graph, ShapeError, Tensor, backward, parameter

__all__ = [
    "ConfigError", "ContractError", "Graph", "OptimizerState", "ShapeError", "Tensor", "adam", "backward",
    "derive_seed", "generator", "grad_check", "ops", "optimizer_step", "parameter", "poly_lr",
    "sgd", "splitmix64",
]
