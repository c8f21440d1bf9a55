# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for patch extraction and grid quantization."""

import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused floating:
    float
    double


def im2col(floating[:, :, :, ::1] xp, int fy, int fx, int stride):
    """Unfold a padded (N, C, H, W) array into (N, C, fy, fx, oy, ox) patches."""
    cdef Py_ssize_t n_b = xp.shape[0], n_c = xp.shape[1]
    cdef Py_ssize_t h = xp.shape[2], w = xp.shape[3]
    cdef Py_ssize_t oy = (h - fy) // stride + 1
    cdef Py_ssize_t ox = (w - fx) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((n_b, n_c, fy, fx, oy, ox), dtype=dtype)
    cdef floating[:, :, :, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, i, j, y, x, yy
    with nogil:
        for b in range(n_b):
            for c in range(n_c):
                for i in range(fy):
                    for j in range(fx):
                        for y in range(oy):
                            yy = y * stride + i
                            for x in range(ox):
                                out[b, c, i, j, y, x] = xp[b, c, yy, x * stride + j]
    return out_arr


def col2im(floating[:, :, :, :, :, ::1] cols, int h, int w, int stride):
    """Scatter-add (N, C, fy, fx, oy, ox) patches back into a padded (N, C, h, w) array."""
    cdef Py_ssize_t n_b = cols.shape[0], n_c = cols.shape[1]
    cdef Py_ssize_t fy = cols.shape[2], fx = cols.shape[3]
    cdef Py_ssize_t oy = cols.shape[4], ox = cols.shape[5]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((n_b, n_c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, i, j, y, x, yy
    with nogil:
        for b in range(n_b):
            for c in range(n_c):
                for i in range(fy):
                    for j in range(fx):
                        for y in range(oy):
                            yy = y * stride + i
                            for x in range(ox):
                                out[b, c, yy, x * stride + j] += cols[b, c, i, j, y, x]
    return out_arr


def quantize_codes(floating[::1] x, double inv_step, double lo, double hi):
    """Round ``x * inv_step`` to the nearest integer code clipped to [lo, hi].

    Returns the codes (same float dtype) and a uint8 mask of elements that were
    inside the clip range before rounding.
    """
    cdef Py_ssize_t n = x.shape[0], k
    dtype = np.float32 if floating is float else np.float64
    codes_arr = np.empty(n, dtype=dtype)
    mask_arr = np.empty(n, dtype=np.uint8)
    cdef floating[::1] codes = codes_arr
    cdef cnp.uint8_t[::1] mask = mask_arr
    cdef floating step = <floating>inv_step
    cdef floating v, c
    cdef floating flo = <floating>lo, fhi = <floating>hi
    # adding and removing 1.5 * 2**52 rounds half to even (like numpy.rint) for |v| < 2**51
    cdef double magic = 6755399441055744.0
    if max(abs(lo), abs(hi)) >= 2.0 ** 51:
        raise ValueError("clip range too wide for exact rounding")
    with nogil:
        # branch-free body so the compiler can use min/max and vectorize
        for k in range(n):
            v = x[k] * step
            mask[k] = <cnp.uint8_t>((flo <= v) & (v <= fhi))
            c = v if v > flo else flo
            c = c if c < fhi else fhi
            codes[k] = <floating>((<double>c + magic) - magic)
    return codes_arr, mask_arr
