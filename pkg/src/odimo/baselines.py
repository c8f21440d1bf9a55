"""Reference mappings: single-accelerator, IO-8bit/backbone-ternary and per-layer Min-Cost."""

from __future__ import annotations

import logging
import math

import numpy as np

from .hardware import AcceleratorSpec, LayerSpec, high_precision_index, layer_energy, layer_latency
from .mapping import MappingDecision, MappingError

log = logging.getLogger(__name__)

# relative tolerance when comparing float energies for the tie-break
_TIE_RTOL = 1e-12


def _fallback(net, accs, wanted: int, name: str) -> int:
    kind = net.layer_spec(name).kind
    if accs[wanted].supports(kind):
        return wanted
    fb = high_precision_index(accs)
    if not accs[fb].supports(kind):
        fb = next((i for i, a in enumerate(accs) if a.supports(kind)), None)
        if fb is None:
            raise MappingError(f"{name}: no accelerator supports {kind} layers")
    log.warning("%s: %s cannot run %s layers, falling back to %s", name, accs[wanted].name, kind, accs[fb].name)
    return fb


def all_single(net, accs, index: int) -> MappingDecision:
    """Every channel on accelerator ``index``; unsupported layers go to the widest accelerator."""
    if not 0 <= index < len(accs):
        raise MappingError(f"accelerator index {index} out of range")
    out = {}
    for node in net.mappable():
        acc = _fallback(net, accs, index, node.name)
        out[node.name] = np.full(net.layer_spec(node.name).c_out, acc)
    return MappingDecision(out, [a.name for a in accs])


def io8_backbone_ternary(net, accs, low: int | None = None, high: int | None = None) -> MappingDecision:
    """First and last Conv/FC layers on the widest accelerator, the rest on the narrowest."""
    layers = [n.name for n in net.mappable()]
    if len(layers) < 3:
        raise MappingError(f"IO-8bit/backbone mapping needs at least 3 Conv/FC layers, got {len(layers)}")
    high = high_precision_index(accs) if high is None else high
    if low is None:
        bits = [a.weight_bits for a in accs]
        low = bits.index(min(bits))
    out = {}
    for k, name in enumerate(layers):
        want = high if k in (0, len(layers) - 1) else low
        out[name] = np.full(net.layer_spec(name).c_out, _fallback(net, accs, want, name))
    return MappingDecision(out, [a.name for a in accs])


# -- Min-Cost -------------------------------------------------------------------------


def exact_cost(layer: LayerSpec, counts, accs, objective: str) -> float:
    if objective == "latency":
        return layer_latency(layer, counts, accs)[0]
    if objective == "energy":
        return layer_energy(layer, counts, accs)
    raise ValueError(f"objective must be 'latency' or 'energy', got {objective!r}")


def _better(cost, dig, best_cost, best_dig) -> bool:
    if best_cost is None:
        return True
    tol = _TIE_RTOL * max(abs(cost), abs(best_cost), 1.0)
    if cost < best_cost - tol:
        return True
    return abs(cost - best_cost) <= tol and dig > best_dig


def _split_two(layer, accs, objective, d: int, allowed) -> list[int]:
    other = 1 - d
    best, best_cost, best_dig = None, None, -1
    for c_d in range(layer.c_out + 1):
        counts = [0, 0]
        counts[d], counts[other] = c_d, layer.c_out - c_d
        if (counts[d] and not allowed[d]) or (counts[other] and not allowed[other]):
            continue
        cost = exact_cost(layer, counts, accs, objective)
        if _better(cost, c_d, best_cost, best_dig):
            best, best_cost, best_dig = counts, cost, c_d
    return best


def _split_dp(layer, accs, objective, d: int, allowed) -> list[int]:
    """Exact minimization for N > 2 accelerators.

    For every candidate layer latency ``M`` (every value some accelerator can
    take), a knapsack over the non-digital accelerators finds the cheapest
    way to place the remaining channels with every latency <= M; the layer
    cost is then ``sum_i (P_act - P_idle) * LAT_i + sum_i P_idle * M`` (latency
    objective: just ``M``). The true optimum is attained at its own M.
    """
    n, c = len(accs), layer.c_out
    lat = np.full((n, c + 1), np.inf)
    for i, acc in enumerate(accs):
        if allowed[i]:
            lat[i] = [acc.latency(layer, k) for k in range(c + 1)]
        else:
            lat[i, 0] = 0.0
    if objective == "latency":
        w = np.zeros(n)
        idle = 1.0
    else:
        w = np.array([a.p_act - a.p_idle for a in accs])
        idle = float(sum(a.p_idle for a in accs))
    others = [i for i in range(n) if i != d]
    candidates = np.unique(lat[np.isfinite(lat)])
    best, best_cost, best_dig = None, None, -1
    for m in candidates:
        # g[r] = cheapest weighted latency of placing r channels on `others`
        g = np.zeros(c + 1)
        g[1:] = np.inf
        choice = []
        for i in others:
            ok = lat[i] <= m
            item = np.where(ok, w[i] * np.where(ok, lat[i], 0.0), np.inf)
            new = np.full(c + 1, np.inf)
            arg = np.zeros(c + 1, dtype=np.int64)
            for k in range(c + 1):
                if not np.isfinite(item[k]):
                    continue
                vals = g[: c + 1 - k] + item[k]
                better = vals < new[k:]
                new[k:][better] = vals[better]
                arg[k:][better] = k
            g = new
            choice.append(arg)
        for c_d in range(c, -1, -1):
            if lat[d, c_d] > m or not np.isfinite(g[c - c_d]):
                continue
            counts = [0] * n
            counts[d] = c_d
            r = c - c_d
            # backtrack through the knapsack (recomputed per accelerator order)
            rem = r
            for j in range(len(others) - 1, -1, -1):
                k = int(choice[j][rem])
                counts[others[j]] = k
                rem -= k
            if rem != 0:
                continue
            cost = exact_cost(layer, counts, accs, objective)
            if _better(cost, c_d, best_cost, best_dig):
                best, best_cost, best_dig = counts, cost, c_d
    return best


def min_cost_layer(layer: LayerSpec, accs, objective: str = "latency") -> list[int]:
    """Channel counts per accelerator minimizing the exact layer cost.

    Ties go to the split with more channels on the widest (digital) accelerator.
    """
    allowed = [a.supports(layer.kind) for a in accs]
    if not any(allowed):
        raise MappingError(f"no accelerator supports {layer.kind} layers")
    d = high_precision_index(accs)
    if len(accs) == 1:
        return [layer.c_out]
    if not allowed[d]:
        d = allowed.index(True)
    if len(accs) == 2:
        return _split_two(layer, accs, objective, d, allowed)
    return _split_dp(layer, accs, objective, d, allowed)


def counts_to_assignments(counts) -> np.ndarray:
    return np.repeat(np.arange(len(counts)), counts)


def min_cost(net, accs, objective: str = "latency") -> MappingDecision:
    """Per-layer independent Min-Cost mapping, channels grouped by accelerator index."""
    out = {}
    for node in net.mappable():
        counts = min_cost_layer(net.layer_spec(node.name), accs, objective)
        out[node.name] = counts_to_assignments(counts)
    return MappingDecision(out, [a.name for a in accs])


def brute_force_layer(layer: LayerSpec, accs, objective: str = "latency"):
    """Exhaustive reference over all compositions of C_out into N parts (small layers only)."""
    n, c = len(accs), layer.c_out
    d = high_precision_index(accs)
    best, best_cost = None, math.inf

    def rec(prefix, left):
        nonlocal best, best_cost
        if len(prefix) == n - 1:
            counts = prefix + [left]
            if any(k and not a.supports(layer.kind) for k, a in zip(counts, accs)):
                return
            cost = exact_cost(layer, counts, accs, objective)
            if best is None or _better(cost, counts[d], best_cost, best[d]):
                best, best_cost = counts, cost
            return
        for k in range(left + 1):
            rec(prefix + [k], left - k)

    rec([], c)
    return best, best_cost
