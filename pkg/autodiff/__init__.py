# Minimal reverse-mode autodiff core
from autodiff.tensor import Tensor, no_grad, is_grad_enabled, tensor
from autodiff.optim import Adam, AdamState, adam_step

__all__ = ["Tensor", "no_grad", "is_grad_enabled", "tensor", "Adam", "AdamState", "adam_step"]
