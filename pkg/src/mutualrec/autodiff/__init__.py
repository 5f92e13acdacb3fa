"""Minimal reverse-mode automatic differentiation over numpy float64 arrays."""

from . import ops
from .gradcheck import finite_difference_grad, grads_close, max_relative_error
from .optim import Adam
from .serialize import checksum, file_sha256, load_checkpoint, save_checkpoint
from .tensor import Tensor, as_tensor, backward, check_finite, grad_enabled, no_grad

__all__ = [
    "Adam",
    "Tensor",
    "as_tensor",
    "backward",
    "check_finite",
    "checksum",
    "file_sha256",
    "finite_difference_grad",
    "grad_enabled",
    "grads_close",
    "load_checkpoint",
    "max_relative_error",
    "no_grad",
    "ops",
    "save_checkpoint",
]
