"""From-scratch reverse-mode autodiff over numpy arrays, plus a radix-2 FFT."""

from .tensor import (
    Tensor, Tape, backward, get_tape, no_grad, check_finite,
    precision, default_dtype, set_default_dtype, is_grad_enabled,
)
from .module import Module, Adam, param, glorot, conv_init, zeros_param
from .gradcheck import finite_difference_check, GradCheckReport
from .fft import ComplexGrid, fft2, ifft2, fftfreq_grid
from . import ops

__all__ = [
    "Tensor", "Tape", "backward", "get_tape", "no_grad", "check_finite",
    "precision", "default_dtype", "set_default_dtype", "is_grad_enabled",
    "Module", "Adam", "param", "glorot", "conv_init", "zeros_param",
    "finite_difference_check", "GradCheckReport",
    "ComplexGrid", "fft2", "ifft2", "fftfreq_grid",
    "ops",
]
