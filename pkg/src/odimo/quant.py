"""Fake quantization with straight-through gradients, LSB truncation and BN folding.

Weights use a symmetric grid with ``2**(n-1) - 1`` positive levels and a
learned log-domain scale ``s`` (so ``n = 2`` gives ternary ``{-e^s, 0, e^s}``)::

    Q(x) = e^s / L * round(L * clip(x / e^s, -1, 1)),   L = 2**(n-1) - 1

Activations are unsigned (post-ReLU) with ``2**n - 1`` levels over a learned
range ``[0, e^r]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .tensor import Tensor, as_tensor


class QuantizationError(ValueError):
    pass


def weight_levels(bits: int) -> int:
    if bits < 2:
        raise QuantizationError(f"weight bit-width must be >= 2, got {bits}")
    return 2 ** (bits - 1) - 1


def act_levels(bits: int) -> int:
    if bits < 1:
        raise QuantizationError(f"activation bit-width must be >= 1, got {bits}")
    return 2**bits - 1


@dataclass
class QuantSpec:
    """Bit-width plus trainable log-scale of one quantizer."""

    bits: int
    log_scale: Tensor = field(default_factory=lambda: Tensor(0.0, requires_grad=True))
    mode: str = "weights"

    def __post_init__(self):
        if self.mode not in ("weights", "activations"):
            raise QuantizationError(f"mode must be 'weights' or 'activations', got {self.mode!r}")
        if self.mode == "weights":
            weight_levels(self.bits)
        else:
            act_levels(self.bits)
        if not isinstance(self.log_scale, Tensor):
            self.log_scale = Tensor(float(self.log_scale), requires_grad=True)

    @property
    def scale(self) -> float:
        return float(np.exp(self.log_scale.data))

    @property
    def step(self) -> float:
        levels = weight_levels(self.bits) if self.mode == "weights" else act_levels(self.bits)
        return self.scale / levels


def _grid_quantize(x: Tensor, log_scale: Tensor, levels: int, lo: int, hi: int, op: str) -> Tensor:
    log_scale = as_tensor(log_scale, x.dtype)
    e = np.exp(np.asarray(log_scale.data, dtype=np.float64))
    codes, inside = _kernels.quantize_codes(x.data, levels / e, lo, hi)
    step = (e / levels).astype(x.dtype)
    out = codes * step

    def back(g):
        gx = g * inside
        # d/ds of e^s/L * round(L*clip(x/e^s)): Q - x inside the range, Q outside
        gs = np.sum(g * (out - x.data * inside))
        return gx, gs

    return Tensor._make(out.astype(x.dtype, copy=False), (x, log_scale), back, op)


def fake_quantize_weights(x: Tensor, q: QuantSpec) -> Tensor:
    if q.mode != "weights":
        raise QuantizationError("fake_quantize_weights needs a weights-mode QuantSpec")
    levels = weight_levels(q.bits)
    return _grid_quantize(x, q.log_scale, levels, -levels, levels, "fq_weights")


def fake_quantize_activations(x: Tensor, bits: int, log_range=0.0) -> Tensor:
    """Unsigned quantization of ``x`` onto ``2**bits - 1`` steps over ``[0, e^log_range]``."""
    levels = act_levels(bits)
    return _grid_quantize(x, as_tensor(log_range, x.dtype), levels, 0, levels, "fq_acts")


def truncate_lsb(codes, drop_bits: int = 1, check: bool = True) -> np.ndarray:
    """Drop the ``drop_bits`` least significant bits of non-negative integer codes."""
    c = np.asarray(codes)
    if check:
        if np.any(c < 0) or np.any(c != np.floor(c)):
            raise QuantizationError("truncate_lsb expects non-negative integer codes")
    return np.floor_divide(c.astype(np.int64), 2**drop_bits)


def truncate_activation(x: Tensor, bits: int, log_range, drop_bits: int) -> Tensor:
    """Value-level LSB truncation of an activation already on the ``bits`` grid.

    The result stays expressed in the original units (codes ``(k >> d) << d``);
    the gradient is passed straight through.
    """
    if drop_bits <= 0:
        return x
    e = float(np.exp(np.asarray(as_tensor(log_range).data, dtype=np.float64)))
    step = e / act_levels(bits)
    codes = np.rint(x.data / step)
    factor = 2**drop_bits
    out = (np.floor(codes / factor) * factor * step).astype(x.dtype)
    return Tensor._make(out, (x,), lambda g: (g,), "truncate")


def weight_codes(w: np.ndarray, bits: int, log_scale: float) -> tuple[np.ndarray, float]:
    """Integer weight codes and the step they are multiplied by."""
    levels = weight_levels(bits)
    e = float(np.exp(log_scale))
    codes, _ = _kernels.quantize_codes(np.asarray(w, dtype=np.float64), levels / e, -levels, levels)
    return codes, e / levels


def act_codes(x: np.ndarray, bits: int, log_range: float) -> tuple[np.ndarray, float]:
    levels = act_levels(bits)
    e = float(np.exp(log_range))
    codes, _ = _kernels.quantize_codes(np.asarray(x, dtype=np.float64), levels / e, 0, levels)
    return codes, e / levels


def init_log_scale(w: np.ndarray, bits: int) -> float:
    """Starting scale: max |w| for multi-bit grids, 1.4 mean |w| for ternary."""
    a = np.abs(np.asarray(w, dtype=np.float64))
    if a.size == 0 or a.max() == 0:
        return 0.0
    ref = 1.4 * a.mean() if bits == 2 else a.max()
    return float(np.log(ref))


def fold_bn(weight, bias, gamma, beta, mean, var, eps: float = 1e-5):
    """Fold a following BatchNorm into conv/FC weights: returns ``(W', b')``."""
    weight = np.asarray(weight)
    var = np.asarray(var, dtype=np.float64)
    denom = var + eps
    if np.any(denom <= 0):
        raise QuantizationError("BatchNorm var + eps must be positive")
    factor = np.asarray(gamma, dtype=np.float64) / np.sqrt(denom)
    if bias is None:
        bias = np.zeros(weight.shape[0])
    shape = (-1,) + (1,) * (weight.ndim - 1)
    w = weight * factor.reshape(shape)
    b = (np.asarray(bias, dtype=np.float64) - mean) * factor + beta
    return w.astype(weight.dtype), b.astype(weight.dtype)
