"""Independent reference implementations used only by the tests."""

import numpy as np


def conv2d_loops(x, w, b, stride=1, padding=0, groups=1):
    """Direct nested-loop cross-correlation."""
    n, c_in, h, wd = x.shape
    c_out, cpg, fy, fx = w.shape
    xp = np.zeros((n, c_in, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding : padding + h, padding : padding + wd] = x
    oy = (h + 2 * padding - fy) // stride + 1
    ox = (wd + 2 * padding - fx) // stride + 1
    opg = c_out // groups
    out = np.zeros((n, c_out, oy, ox))
    for bi in range(n):
        for o in range(c_out):
            g = o // opg
            for y in range(oy):
                for xx in range(ox):
                    acc = 0.0 if b is None else float(b[o])
                    for c in range(cpg):
                        for i in range(fy):
                            for j in range(fx):
                                acc += float(w[o, c, i, j]) * float(xp[bi, g * cpg + c, y * stride + i, xx * stride + j])
                    out[bi, o, y, xx] = acc
    return out


def linear_loops(x, w, b):
    n, f_in = x.shape
    f_out = w.shape[0]
    out = np.zeros((n, f_out))
    for i in range(n):
        for o in range(f_out):
            acc = float(b[o])
            for k in range(f_in):
                acc += float(x[i, k]) * float(w[o, k])
            out[i, o] = acc
    return out


def central_diff(f, arrays, h=1e-3, valid=None, order=2):
    """Central finite differences of scalar ``f(*arrays)`` w.r.t. every array (float64).

    ``valid(*arrays)`` may return a hashable signature of the piecewise region
    (e.g. a ReLU mask); elements whose +-h probes change it are reported as NaN.
    ``order=4`` uses the five-point stencil (probes at +-h and +-2h).
    """
    grads = []
    for a in arrays:
        g = np.zeros_like(a, dtype=np.float64)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = a[idx]
            base = valid(*arrays) if valid else None
            offsets = (1, -1) if order == 2 else (1, -1, 2, -2)
            vals, same = {}, True
            for k in offsets:
                a[idx] = orig + k * h
                vals[k] = f(*arrays)
                if valid and valid(*arrays) != base:
                    same = False
            a[idx] = orig
            if not same:
                g[idx] = np.nan
            elif order == 2:
                g[idx] = (vals[1] - vals[-1]) / (2 * h)
            else:
                g[idx] = (8 * (vals[1] - vals[-1]) - (vals[2] - vals[-2])) / (12 * h)
        grads.append(g)
    return grads


def max_rel_err(analytic, numeric, floor=1e-3):
    """Elementwise relative error; denominators are floored at ``floor * max|numeric|``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    keep = ~np.isnan(n)
    a, n = a[keep], n[keep]
    scale = max(float(np.max(np.abs(n))), 1e-12) * floor
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), scale)))


def lat_aimc_ref(c_in, fx, fy, ox, oy, c):
    """Re-evaluation of the analog latency formula with plain integer math."""
    if c == 0:
        return 0
    rows = (c_in * fx * fy + 1151) // 1152
    cols = (c + 511) // 512
    return rows * cols * ox * oy + 2 * 4 * c_in * cols


def lat_digital_ref(c_in, fx, fy, ox, oy, c):
    if c == 0:
        return 0
    return ((c + 15) // 16) * ((oy + 15) // 16) * c_in * ox * fx * fy + c_in * c * fx * fy
