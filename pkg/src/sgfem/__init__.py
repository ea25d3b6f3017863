"""Adaptive stochastic Galerkin finite elements with operator compression."""

from .kernels import BACKEND as KERNEL_BACKEND  # noqa: F401

__version__ = "0.1.0"
