"""Multiscale finite elements with constrained energy minimization for
high-contrast elliptic problems with inhomogeneous boundary data."""

__version__ = "0.1.0"

from cemms._kernels import BACKEND as kernel_backend  # noqa: F401
