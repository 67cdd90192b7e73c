"""Backstepping boundary control of reaction-diffusion PDEs with a learned gain operator."""

__version__ = "0.1.0"

from .core import (ConvergenceError, DomainError, InvalidInputError, KernelField, PdeState,
                   ReactionProfile, UniformGrid1D, l2_norm, sup_norm, trapezoid,
                   triangle_interpolate)
from .kernel_solver import (GoursatSolveOptions, inverse_kernel, kernel_residuals, solve_kernel,
                            solve_kernel_fd, solve_kernel_integral)

__all__ = [
    "ConvergenceError", "DomainError", "InvalidInputError", "KernelField", "PdeState",
    "ReactionProfile", "UniformGrid1D", "l2_norm", "sup_norm", "trapezoid", "triangle_interpolate",
    "GoursatSolveOptions", "inverse_kernel", "kernel_residuals", "solve_kernel",
    "solve_kernel_fd", "solve_kernel_integral", "__version__",
]
