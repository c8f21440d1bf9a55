"""Pure-numpy versions of the compiled kernels (same signatures and results)."""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def im2col(xp, fy, fx, stride):
    n, c, h, w = xp.shape
    oy = (h - fy) // stride + 1
    ox = (w - fx) // stride + 1
    sn, sc, sh, sw = xp.strides
    view = as_strided(
        xp,
        shape=(n, c, fy, fx, oy, ox),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return np.ascontiguousarray(view)


def col2im(cols, h, w, stride):
    n, c, fy, fx, oy, ox = cols.shape
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    for i in range(fy):
        ys = slice(i, i + stride * (oy - 1) + 1, stride)
        for j in range(fx):
            xs = slice(j, j + stride * (ox - 1) + 1, stride)
            out[:, :, ys, xs] += cols[:, :, i, j]
    return out


def quantize_codes(x, inv_step, lo, hi):
    v = x * x.dtype.type(inv_step)
    mask = ((v >= lo) & (v <= hi)).astype(np.uint8)
    codes = np.rint(np.clip(v, lo, hi)).astype(x.dtype, copy=False)
    return codes, mask
