"""Hot inner loops: patch extraction for convolution/pooling and grid quantization.

The compiled extension ``_ckernels`` is used when it was built; otherwise the
numpy implementations in ``_pykernels`` are used. Setting the environment
variable ``ODIMO_PURE_PYTHON=1`` forces the fallback.
"""

import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("ODIMO_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels


def _as_float(a):
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float64)
    return np.ascontiguousarray(a)


def im2col(xp, fy, fx, stride):
    """(N, C, H, W) padded input -> (N, C, fy, fx, oy, ox) patches."""
    return _impl.im2col(_as_float(xp), int(fy), int(fx), int(stride))


def col2im(cols, h, w, stride):
    """Adjoint of :func:`im2col`: overlapping patches are summed."""
    return _impl.col2im(_as_float(cols), int(h), int(w), int(stride))


def quantize_codes(x, inv_step, lo, hi):
    """Integer codes ``rint(clip(x * inv_step, lo, hi))`` plus the in-range mask."""
    x = _as_float(x)
    codes, mask = _impl.quantize_codes(x.reshape(-1), float(inv_step), float(lo), float(hi))
    return codes.reshape(x.shape), mask.reshape(x.shape).view(bool)


def use_backend(name):
    """Switch kernel implementation at runtime ("cython" or "python"); used by benchmarks/tests."""
    global _impl, BACKEND
    if name == "python":
        _impl, BACKEND = _pykernels, "python"
    elif name == "cython":
        from . import _ckernels

        _impl, BACKEND = _ckernels, "cython"
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
