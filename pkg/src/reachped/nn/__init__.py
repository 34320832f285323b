from .tensor import Tensor, backward, matmul, no_grad, param, relu, reshape, transpose, tsum
from .ops import dropout, linear, masked_mse, softmax_lastdim
from .layers import BatchNorm, xavier_uniform
from .optim import AdamState, adam_step, zero_grads
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "Tensor", "backward", "matmul", "no_grad", "param", "relu", "reshape",
    "transpose", "tsum", "dropout", "linear", "masked_mse", "softmax_lastdim",
    "BatchNorm", "xavier_uniform", "AdamState", "adam_step", "zero_grads",
    "load_checkpoint", "save_checkpoint",
]
