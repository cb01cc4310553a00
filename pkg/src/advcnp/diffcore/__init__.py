"""Minimal reverse-mode autodiff and neural layers on numpy float64 arrays."""
from .gradcheck import grad_check, gradients
from .nn import (MLP, BatchNorm, Linear, Module, MultiHeadAttention, glorot_uniform, mlp_apply,
                 scaled_dot_attention)
from .optim import Adam, AdamState, NonFiniteGradient, adam_step
from .serialize import CheckpointError, load_tensors, save_tensors
from .tensor import (ShapeError, Tensor, UsageError, add, as_tensor, broadcast_to, concat, div, exp,
                     getitem, is_grad_enabled, linear, log, log_sigmoid, log_softmax, logsumexp, matmul, mean,
                     mul, neg, no_grad, power, relu, relu_head, reshape, sigmoid, softmax, softplus, sqrt, square,
                     sub, sum_, tanh, transpose)

__all__ = [
    "Adam", "AdamState", "BatchNorm", "CheckpointError", "Linear", "MLP", "Module",
    "MultiHeadAttention", "NonFiniteGradient", "ShapeError", "Tensor", "UsageError", "adam_step",
    "add", "as_tensor", "broadcast_to", "concat", "div", "exp", "getitem", "glorot_uniform",
    "grad_check", "gradients", "is_grad_enabled", "linear", "load_tensors", "log", "log_sigmoid",
    "log_softmax", "logsumexp", "matmul", "mean", "mlp_apply", "mul", "neg", "no_grad", "power",
    "relu", "relu_head", "reshape", "save_tensors", "scaled_dot_attention", "sigmoid", "softmax", "softplus",
    "sqrt", "square", "sub", "sum_", "tanh", "transpose",
]
