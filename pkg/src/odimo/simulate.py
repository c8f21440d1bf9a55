"""Integer-faithful inference of a mapped network and Table-style cost reports.

The forward pass works on exact grids: activations are integer codes at the
storage width times a per-site step, weights are integer codes times a
per-(layer, accelerator) step. Conv/FC accumulations are sums of integer
products, computed exactly in float64, then rescaled per output channel and
offset by the float bias. Because every channel is computed by the same
exact arithmetic, reordering or splitting a layer gives bit-identical outputs.

Latency and energy come from the exact accelerator models, summed over
layers with the accelerators of one layer running in parallel.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .hardware import energy_from_latencies, layer_latency, low_precision_mask
from .mapping import MappingDecision, MappingError
from .network import FloatExecutor, Network, Node, run
from .quant import act_codes, act_levels, weight_codes
from .tensor import Tensor, no_grad


class IntegerExecutor(FloatExecutor):
    """Exact-grid forward pass of a fixed mapping.

    ``plan`` (from the reorder pass) switches Conv/FC layers to split
    execution: each contiguous sub-layer computes its own output slice from
    the full input and the slices are concatenated.
    """

    def __init__(self, net: Network, accs, decision: MappingDecision, quant, plan=None):
        super().__init__(net)
        self.accs = list(accs)
        self.decision = decision
        self.quant = quant
        self.plan = plan
        self.store_bits = max(a.activation_bits for a in self.accs)
        self._cache = {}

    def _step(self, site: str) -> float:
        return float(np.exp(float(self.quant.a_ranges[site].data))) / act_levels(self.store_bits)

    def _weights(self, node: Node):
        """Integer weight codes and per-channel weight steps under the mapping."""
        if node.name in self._cache:
            return self._cache[node.name]
        a = self.decision.assignments[node.name]
        w = np.asarray(self.net.params[f"{node.name}.weight"].data, dtype=np.float64)
        codes = np.zeros_like(w)
        steps = np.zeros(len(a))
        for i in np.unique(a):
            acc = self.accs[i]
            c, step = weight_codes(w, acc.weight_bits, float(self.quant.w_scales[node.name][i].data))
            sel = a == i
            codes[sel] = c[sel]
            steps[sel] = step
        b = self.net.params.get(f"{node.name}.bias")
        bias = np.zeros(len(a)) if b is None else np.asarray(b.data, dtype=np.float64)
        drops = np.array([self.store_bits - self.accs[i].activation_bits for i in a])
        self._cache[node.name] = (codes, steps, bias, drops)
        return self._cache[node.name]

    def _accumulate(self, node: Node, xcodes: np.ndarray, wcodes: np.ndarray, drops: np.ndarray) -> np.ndarray:
        """Exact integer accumulation, inputs truncated per output channel."""
        out = None
        for d in np.unique(drops):
            xin = xcodes if d == 0 else np.floor(xcodes / 2**d) * 2**d
            wpart = wcodes if len(np.unique(drops)) == 1 else wcodes * (drops == d).reshape((-1,) + (1,) * (wcodes.ndim - 1))
            part = self.apply_layer(node, Tensor(xin), Tensor(wpart), None).data
            out = part if out is None else out + part
        return out

    def layer(self, node: Node, x: Tensor) -> Tensor:
        site = self.net.input_site(node.name)
        step_in = self._step(site)
        xcodes = np.rint(np.asarray(x.data, dtype=np.float64) / step_in)
        codes, steps, bias, drops = self._weights(node)
        shape = (1, -1) + (1,) * (x.ndim - 2)
        if self.plan is None:
            acc = self._accumulate(node, xcodes, codes, drops)
            return Tensor(acc * (step_in * steps).reshape(shape) + bias.reshape(shape))
        parts = []
        for sub in self.plan[node.name]:
            s = slice(sub.start, sub.stop)
            acc = self._accumulate(node, xcodes, codes[s], drops[s])
            parts.append(acc * (step_in * steps[s]).reshape(shape) + bias[s].reshape(shape))
        return Tensor(np.concatenate(parts, axis=1))

    def act(self, node: Node, y: Tensor) -> Tensor:
        r = float(self.quant.a_ranges[node.name].data)
        codes, step = act_codes(np.asarray(y.data, dtype=np.float64), self.store_bits, r)
        producer = self.net.site_producer(node.name)
        if producer is not None:
            drops = self._weights(self.net.node(producer))[3]
            factor = (2.0 ** drops).reshape((1, -1) + (1,) * (codes.ndim - 2))
            codes = np.floor(codes / factor) * factor
        return Tensor(codes * step)


def predict(net: Network, executor, x: np.ndarray, batch: int = 500) -> np.ndarray:
    outs = []
    with no_grad():
        for s in range(0, len(x), batch):
            outs.append(run(net, Tensor(np.asarray(x[s:s + batch], dtype=np.float64)), executor).data)
    return np.concatenate(outs) if outs else np.zeros((0,))


# -- costs and reports -------------------------------------------------------------


@dataclass
class LayerCost:
    layer: str
    c_out: int
    channels: list
    latencies: list
    latency: float
    energy: float

    def active_pct(self) -> list:
        return [100.0 * l / self.latency if self.latency else 0.0 for l in self.latencies]


def layer_costs(net: Network, decision: MappingDecision, accs) -> list[LayerCost]:
    out = []
    for name, spec in net.layer_specs().items():
        if name not in decision.assignments:
            raise MappingError(f"decision has no entry for layer {name}")
        counts = decision.counts(name, len(accs))
        m, lats = layer_latency(spec, counts, accs)
        e = energy_from_latencies(m, lats, accs)
        out.append(LayerCost(name, spec.c_out, counts, list(lats), m, e))
    return out


@dataclass
class InferenceReport:
    accuracy: float | None
    latency_cycles: float
    energy_units: float
    utilization_pct: dict
    analog_channel_pct: float
    layers: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = [asdict(l) for l in self.layers]
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps() + "\n")


def cost_report(net: Network, decision: MappingDecision, accs, accuracy: float | None = None) -> InferenceReport:
    """Latency, energy, per-accelerator utilization and analog channel share."""
    decision.validate(net, accs)
    rows = layer_costs(net, decision, accs)
    total_m = sum(r.latency for r in rows)
    util = {
        a.name: (100.0 * sum(r.latencies[i] for r in rows) / total_m if total_m else 0.0)
        for i, a in enumerate(accs)
    }
    low = low_precision_mask(accs)
    total_c = sum(r.c_out for r in rows)
    analog = sum(sum(r.channels[i] for i in range(len(accs)) if low[i]) for r in rows)
    return InferenceReport(
        accuracy=accuracy,
        latency_cycles=total_m,
        energy_units=float(sum(r.energy for r in rows)),
        utilization_pct=util,
        analog_channel_pct=100.0 * analog / total_c if total_c else 0.0,
        layers=rows,
    )


def simulate(net: Network, decision: MappingDecision, accs, quant, x: np.ndarray, y: np.ndarray, plan=None) -> InferenceReport:
    """Integer-faithful accuracy on ``(x, y)`` plus the exact cost report."""
    decision.validate(net, accs)
    logits = predict(net, IntegerExecutor(net, accs, decision, quant, plan), x)
    acc = 100.0 * float(np.mean(np.argmax(logits, axis=1) == np.asarray(y))) if len(y) else 0.0
    return cost_report(net, decision, accs, acc)


def utilization_breakdown(net: Network, decision: MappingDecision, accs) -> list[dict]:
    """Per-layer rows: channels, cycles and active share of the layer latency per accelerator."""
    rows = []
    for r in layer_costs(net, decision, accs):
        row = {"layer": r.layer, "c_out": r.c_out, "latency_cycles": r.latency, "energy_units": r.energy}
        for a, ch, lat, pct in zip(accs, r.channels, r.latencies, r.active_pct()):
            row[f"channels_{a.name}"] = ch
            row[f"cycles_{a.name}"] = lat
            row[f"active_pct_{a.name}"] = round(pct, 6)
        rows.append(row)
    return rows


def breakdown_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return buf.getvalue()


def float_logits(net: Network, x: np.ndarray) -> np.ndarray:
    """Unquantized float64 forward pass (used for equivalence checks)."""
    outs = []
    with no_grad():
        for s in range(0, len(x), 500):
            outs.append(run(net, Tensor(np.asarray(x[s:s + 500], dtype=np.float64)), FloatExecutor(net)).data)
    return np.concatenate(outs)
