"""Analytical latency and energy models for channel-split layers.

All latency functions accept the number of output channels assigned to the
accelerator either as a plain number (exact mode: integer cycles) or as a
:class:`Tensor` (differentiable mode: ceilings are evaluated exactly in the
forward pass and treated as identity in the backward pass).

Units are cycles for latency and power-units x cycles for energy.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .ops import smooth_max
from .tensor import Tensor, as_tensor, stack

LAYER_KINDS = ("conv", "depthwise", "fc")
LATENCY_MODELS = ("aimc", "digital", "ops_proportional")

# expected channel counts come from float sums of softmax rows
_CEIL_TOL = 1e-6


class CostModelError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    """Geometry of one Conv/FC layer.

    ``c_in`` is the number of input channels each output channel reads (1 for
    depthwise); FC layers are 1x1 convolutions with a 1x1 output.
    """

    c_in: int
    c_out: int
    f_x: int = 1
    f_y: int = 1
    o_x: int = 1
    o_y: int = 1
    kind: str = "conv"
    name: str = ""

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise CostModelError(f"unknown layer kind {self.kind!r}")
        for attr in ("c_in", "c_out", "f_x", "f_y", "o_x", "o_y"):
            if getattr(self, attr) < 1:
                raise CostModelError(f"LayerSpec.{attr} must be positive, got {getattr(self, attr)}")

    @property
    def macs_per_channel(self) -> int:
        return self.c_in * self.f_x * self.f_y * self.o_x * self.o_y


@dataclass(frozen=True)
class AcceleratorSpec:
    name: str
    weight_bits: int
    activation_bits: int
    latency_model: str
    p_act: float = 1.0
    p_idle: float = 0.0
    supported_kinds: frozenset = field(default_factory=lambda: frozenset(LAYER_KINDS))
    # AIMC array geometry and weight-DMA factor (2 x 4)
    aimc_rows: int = 1152
    aimc_cols: int = 512
    aimc_dma: int = 8
    # digital PE-array parallelism over output channels and output rows
    dig_cout_par: int = 16
    dig_oy_par: int = 16
    ops_k: float = 1.0
    # activation transfers live in shared L1 and are not charged
    act_transfer: float = 0.0

    def __post_init__(self):
        if self.latency_model not in LATENCY_MODELS:
            raise CostModelError(f"unknown latency model {self.latency_model!r}")
        if not (self.p_act >= self.p_idle >= 0):
            raise CostModelError(f"{self.name}: need p_act >= p_idle >= 0, got {self.p_act}, {self.p_idle}")
        object.__setattr__(self, "supported_kinds", frozenset(self.supported_kinds))
        bad = set(self.supported_kinds) - set(LAYER_KINDS)
        if bad:
            raise CostModelError(f"{self.name}: unknown layer kinds {sorted(bad)}")

    def supports(self, kind: str) -> bool:
        return kind in self.supported_kinds

    def latency(self, layer: LayerSpec, c_out):
        if self.latency_model == "aimc":
            return lat_aimc(layer, c_out, self)
        if self.latency_model == "digital":
            return lat_digital(layer, c_out, self)
        return lat_ops_proportional(layer, c_out, self.ops_k)


def _ceil_div_ste(num, den: int):
    """ceil(num / den); exact for integers, straight-through gradient for Tensors."""
    if isinstance(num, Tensor):
        x = num / den
        out = np.ceil(x.data - _CEIL_TOL)
        return Tensor._make(out.astype(x.dtype), (x,), lambda g: (g,), "ceil_ste")
    if isinstance(num, (int, np.integer)):
        return -(-int(num) // den)
    return math.ceil(num / den - _CEIL_TOL)


def _plus_transfer(lat, acc: AcceleratorSpec):
    return lat + acc.act_transfer if acc.act_transfer else lat


def _check_count(layer: LayerSpec, c) -> None:
    v = float(c.data) if isinstance(c, Tensor) else float(c)
    if v < 0:
        raise CostModelError(f"negative channel count {v}")
    if v > layer.c_out + 1e-4:
        raise CostModelError(f"{v} channels assigned but layer has only {layer.c_out}")


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def lat_aimc(layer: LayerSpec, c_out, acc: AcceleratorSpec | None = None):
    """Compute plus weight-DMA cycles of an analog in-memory array."""
    acc = acc or DIANA_AIMC
    _check_count(layer, c_out)
    row_tiles = _ceil_div(layer.c_in * layer.f_x * layer.f_y, acc.aimc_rows)
    col_tiles = _ceil_div_ste(c_out, acc.aimc_cols)
    return _plus_transfer(col_tiles * (row_tiles * layer.o_x * layer.o_y + acc.aimc_dma * layer.c_in), acc)


def lat_digital(layer: LayerSpec, c_out, acc: AcceleratorSpec | None = None):
    """Compute plus weight-DMA cycles of the digital PE array."""
    acc = acc or DIANA_DIGITAL
    _check_count(layer, c_out)
    kernel = layer.f_x * layer.f_y
    oy_tiles = _ceil_div(layer.o_y, acc.dig_oy_par)
    compute = _ceil_div_ste(c_out, acc.dig_cout_par) * (oy_tiles * layer.c_in * layer.o_x * kernel)
    return _plus_transfer(compute + c_out * (layer.c_in * kernel), acc)


def lat_ops_proportional(layer: LayerSpec, c_out, k: float = 1.0):
    _check_count(layer, c_out)
    return c_out * (k * layer.macs_per_channel)


def _is_tensor_list(values) -> bool:
    return any(isinstance(v, Tensor) for v in values)


def _check_assignment(layer: LayerSpec, counts) -> None:
    total = sum(float(c.data) if isinstance(c, Tensor) else float(c) for c in counts)
    if abs(total - layer.c_out) > 1e-4:
        raise CostModelError(f"channel assignments sum to {total}, layer {layer.name or ''} has {layer.c_out}")


def per_accelerator_latency(layer: LayerSpec, counts: Sequence, accs: Sequence[AcceleratorSpec]) -> list:
    if len(counts) != len(accs):
        raise CostModelError(f"{len(counts)} channel counts for {len(accs)} accelerators")
    _check_assignment(layer, counts)
    return [acc.latency(layer, c) for acc, c in zip(accs, counts)]


def layer_latency(layer, counts, accs, mode: str = "exact", beta: float | None = None):
    """Layer latency ``M`` with accelerators running in parallel.

    Returns ``(M, per_accelerator_latencies)``. Exact mode takes the max; smooth
    mode takes a log-sum-exp with temperature ``beta``.
    """
    lats = per_accelerator_latency(layer, counts, accs)
    if mode == "exact":
        if _is_tensor_list(lats):
            vals = stack([as_tensor(v).reshape(()) for v in lats])
            idx = int(np.argmax(vals.data))
            return vals[idx], lats
        return max(lats), lats
    if mode == "smooth":
        if beta is None:
            raise CostModelError("smooth mode needs beta")
        return smooth_max([as_tensor(v, np.float64) for v in lats], beta), lats
    raise CostModelError(f"unknown mode {mode!r}")


def energy_from_latencies(m, lats, accs):
    total = 0.0
    for acc, lat in zip(accs, lats):
        total = total + acc.p_act * lat + acc.p_idle * (m - lat)
    return total


def layer_energy(layer, counts, accs, mode: str = "exact", beta: float | None = None):
    """Sum over accelerators of active energy plus idle energy up to the layer latency."""
    m, lats = layer_latency(layer, counts, accs, mode, beta)
    return energy_from_latencies(m, lats, accs)


def expected_channels(alpha_bar: Tensor) -> Tensor:
    """Expected channel count per accelerator from (C_out, N) softmax weights."""
    return alpha_bar.sum(axis=0)


# -- presets and config files ---------------------------------------------------

# Placeholder relative powers; overridden by the config file in real use.
DIANA_AIMC = AcceleratorSpec(
    "aimc", weight_bits=2, activation_bits=7, latency_model="aimc", p_act=1.0, p_idle=0.1,
    supported_kinds=("conv", "fc"),
)
DIANA_DIGITAL = AcceleratorSpec(
    "digital", weight_bits=8, activation_bits=8, latency_model="digital", p_act=1.0, p_idle=0.1,
)


def diana_accelerators() -> list[AcceleratorSpec]:
    return [DIANA_AIMC, DIANA_DIGITAL]


def abstract_accelerators(idle: str = "active", k: float = 1.0) -> list[AcceleratorSpec]:
    """Ops-proportional pair: ternary plus an 8-bit unit drawing 10x the active power.

    ``idle="active"`` sets P_idle = P_act (no shutdown), ``idle="zero"`` ideal shutdown.
    """
    if idle not in ("active", "zero"):
        raise CostModelError("idle must be 'active' or 'zero'")
    out = []
    for name, bits, act_bits, p in (("ternary", 2, 7, 1.0), ("int8", 8, 8, 10.0)):
        out.append(
            AcceleratorSpec(
                name, weight_bits=bits, activation_bits=act_bits, latency_model="ops_proportional",
                p_act=p, p_idle=p if idle == "active" else 0.0, ops_k=k,
            )
        )
    return out


_INT_FIELDS = ("weight_bits", "activation_bits", "aimc_rows", "aimc_cols", "aimc_dma", "dig_cout_par", "dig_oy_par")
_FLOAT_FIELDS = ("p_act", "p_idle", "ops_k", "act_transfer")


def load_accelerators(path) -> list[AcceleratorSpec]:
    """Read accelerators from an INI file; section order gives the accelerator index."""
    parser = configparser.ConfigParser()
    text = Path(path).read_text()
    parser.read_string(text, source=str(path))
    return parse_accelerators(parser)


def parse_accelerators(parser: configparser.ConfigParser) -> list[AcceleratorSpec]:
    known = set(_INT_FIELDS) | set(_FLOAT_FIELDS) | {"latency_model", "supported_kinds"}
    accs = []
    for section in parser.sections():
        items = dict(parser.items(section))
        unknown = set(items) - known
        if unknown:
            raise CostModelError(f"[{section}] unknown keys: {sorted(unknown)}")
        for req in ("weight_bits", "activation_bits", "latency_model"):
            if req not in items:
                raise CostModelError(f"[{section}] missing required key {req!r}")
        kwargs = {"name": section, "latency_model": items["latency_model"].strip()}
        for k in _INT_FIELDS:
            if k in items:
                kwargs[k] = int(items[k])
        for k in _FLOAT_FIELDS:
            if k in items:
                kwargs[k] = float(items[k])
        if "supported_kinds" in items:
            kwargs["supported_kinds"] = tuple(s.strip() for s in items["supported_kinds"].split(",") if s.strip())
        accs.append(AcceleratorSpec(**kwargs))
    if not accs:
        raise CostModelError("accelerator config defines no sections")
    return accs


def dump_accelerators(accs: Sequence[AcceleratorSpec]) -> str:
    lines = []
    for acc in accs:
        lines.append(f"[{acc.name}]")
        lines.append(f"latency_model = {acc.latency_model}")
        for k in _INT_FIELDS + _FLOAT_FIELDS:
            lines.append(f"{k} = {getattr(acc, k)}")
        lines.append("supported_kinds = " + ", ".join(k for k in LAYER_KINDS if k in acc.supported_kinds))
        lines.append("")
    return "\n".join(lines)


def high_precision_index(accs: Sequence[AcceleratorSpec]) -> int:
    """Index of the accelerator with the widest weights (the "digital" one); lowest index on ties."""
    bits = [a.weight_bits for a in accs]
    return bits.index(max(bits))


def low_precision_mask(accs: Sequence[AcceleratorSpec]) -> np.ndarray:
    """Accelerators with narrower weights than the widest one (the "analog" side)."""
    top = max(a.weight_bits for a in accs)
    return np.array([a.weight_bits < top for a in accs])
