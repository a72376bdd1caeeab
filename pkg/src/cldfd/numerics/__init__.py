"""Minimal dense tensor algebra with reverse-mode autodiff."""
from . import ops
from .checkpoint import config_hash, load_container, save_container
from .gradcheck import GradCheckReport, grad_check
from .kernels import BACKEND
from .nn import (
    batch_norm,
    conv2d,
    cosine_rows,
    cosine_sim,
    global_avg_pool,
    he_uniform,
    l2_normalize,
    l2_sq,
    linear,
    relu,
    softmax_cross_entropy,
)
from .optim import SGD, OptimizerState, sgd_step, step_lr
from .rng import child_seed, stream
from .tensor import Node, Tape, Tensor, backward, default_dtype, grad_enabled, no_grad, precision

__all__ = [
    "BACKEND",
    "GradCheckReport",
    "Node",
    "OptimizerState",
    "SGD",
    "Tape",
    "Tensor",
    "backward",
    "batch_norm",
    "child_seed",
    "config_hash",
    "conv2d",
    "cosine_rows",
    "cosine_sim",
    "default_dtype",
    "global_avg_pool",
    "grad_check",
    "grad_enabled",
    "he_uniform",
    "l2_normalize",
    "l2_sq",
    "linear",
    "load_container",
    "no_grad",
    "ops",
    "precision",
    "relu",
    "save_container",
    "sgd_step",
    "softmax_cross_entropy",
    "step_lr",
    "stream",
]
