"""Differentiable channel-wise mapping of small DNNs onto heterogeneous-precision accelerators."""

from ._kernels import BACKEND as KERNEL_BACKEND
from .tensor import Tensor, no_grad, set_default_dtype

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "Tensor", "no_grad", "set_default_dtype", "__version__"]
