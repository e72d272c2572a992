"""conemaflow: a desk-scale lab for regularized conical parabolic Monge-Ampere flows."""

__version__ = "0.1.0"

from ._kernels import BACKEND as kernel_backend  # noqa: F401
