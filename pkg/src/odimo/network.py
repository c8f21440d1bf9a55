"""Declarative small-CNN graphs and a pluggable forward executor.

A :class:`Network` is a topologically ordered list of :class:`Node` objects plus
named parameters. Supported ops: ``input``, ``conv``, ``fc``, ``bn``, ``relu``,
``add``, ``maxpool``, ``gap`` (global average pool) and ``flatten``.

Activation quantization sites are the outputs of ``input``, ``relu`` and
``gap`` nodes; every Conv/FC input must trace back to one of them through
grid-preserving ops (``maxpool``, ``flatten``) so that quantized simulation
stays on exact integer grids.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import ops
from .hardware import LayerSpec
from .tensor import Tensor

OPS = ("input", "conv", "fc", "bn", "relu", "add", "maxpool", "gap", "flatten")
SITE_OPS = ("input", "relu", "gap")
PASSTHROUGH_OPS = ("maxpool", "flatten")


class NetworkError(ValueError):
    pass


@dataclass
class Node:
    name: str
    op: str
    inputs: tuple = ()
    attrs: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "op": self.op, "inputs": list(self.inputs), **self.attrs}


class Network:
    """Graph structure, trainable parameters (Tensors) and BN running statistics."""

    def __init__(self, nodes: Iterable[Node], input_shape, params=None, buffers=None):
        self.nodes = list(nodes)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.params: dict[str, Tensor] = params or {}
        self.buffers: dict[str, np.ndarray] = buffers or {}
        self._by_name = {n.name: n for n in self.nodes}
        self._validate()
        self.shapes = self._infer_shapes()

    # -- structure -----------------------------------------------------------
    def _validate(self) -> None:
        seen = set()
        if not self.nodes or self.nodes[0].op != "input":
            raise NetworkError("first node must be the input")
        for node in self.nodes:
            if node.op not in OPS:
                raise NetworkError(f"{node.name}: unknown op {node.op!r}")
            if node.name in seen:
                raise NetworkError(f"duplicate node name {node.name!r}")
            for i in node.inputs:
                if i not in seen:
                    raise NetworkError(f"{node.name}: input {i!r} is not defined earlier")
            expected = {"input": 0, "add": 2}.get(node.op, 1)
            if node.op == "add":
                if len(node.inputs) < 2:
                    raise NetworkError(f"{node.name}: add needs at least 2 inputs")
            elif len(node.inputs) != expected:
                raise NetworkError(f"{node.name}: {node.op} takes {expected} input(s)")
            seen.add(node.name)

    def _infer_shapes(self) -> dict:
        shapes = {}
        for node in self.nodes:
            ins = [shapes[i] for i in node.inputs]
            a = node.attrs
            if node.op == "input":
                s = self.input_shape
            elif node.op == "conv":
                c, h, w = ins[0]
                if c != a["in_ch"]:
                    raise NetworkError(f"{node.name}: expects {a['in_ch']} input channels, gets {c}")
                k, st, p = a["kernel"], a.get("stride", 1), a.get("padding", 0)
                s = (a["out_ch"], ops.conv_output_size(h, k, st, p), ops.conv_output_size(w, k, st, p))
            elif node.op == "fc":
                if len(ins[0]) != 1 or ins[0][0] != a["in_features"]:
                    raise NetworkError(f"{node.name}: expects ({a['in_features']},) features, gets {ins[0]}")
                s = (a["out_features"],)
            elif node.op == "add":
                if any(x != ins[0] for x in ins):
                    raise NetworkError(f"{node.name}: add input shapes differ: {ins}")
                s = ins[0]
            elif node.op == "maxpool":
                c, h, w = ins[0]
                k, st = a["kernel"], a.get("stride", a["kernel"])
                s = (c, ops.conv_output_size(h, k, st, 0), ops.conv_output_size(w, k, st, 0))
            elif node.op == "gap":
                s = (ins[0][0],)
            elif node.op == "flatten":
                s = (int(np.prod(ins[0])),)
            else:
                s = ins[0]
            shapes[node.name] = s
        return shapes

    def node(self, name: str) -> Node:
        return self._by_name[name]

    @property
    def output(self) -> str:
        return self.nodes[-1].name

    def consumers(self, name: str) -> list[Node]:
        return [n for n in self.nodes if name in n.inputs]

    def mappable(self) -> list[Node]:
        """Conv/FC nodes in topological order."""
        return [n for n in self.nodes if n.op in ("conv", "fc")]

    def layer_kind(self, node: Node) -> str:
        if node.op == "fc":
            return "fc"
        g = node.attrs.get("groups", 1)
        return "depthwise" if g > 1 and g == node.attrs["in_ch"] else "conv"

    def layer_spec(self, name: str) -> LayerSpec:
        node = self.node(name)
        if node.op == "fc":
            return LayerSpec(node.attrs["in_features"], node.attrs["out_features"], kind="fc", name=name)
        a = node.attrs
        _, oy, ox = self.shapes[name]
        c_in = a["in_ch"] // a.get("groups", 1)
        return LayerSpec(c_in, a["out_ch"], a["kernel"], a["kernel"], ox, oy, kind=self.layer_kind(node), name=name)

    def layer_specs(self) -> dict[str, LayerSpec]:
        return {n.name: self.layer_spec(n.name) for n in self.mappable()}

    def quant_sites(self) -> list[str]:
        return [n.name for n in self.nodes if n.op in SITE_OPS]

    def input_site(self, name: str) -> str:
        """Quantization site that feeds a Conv/FC node (through pool/flatten)."""
        cur = self.node(name).inputs[0]
        while self.node(cur).op in PASSTHROUGH_OPS:
            cur = self.node(cur).inputs[0]
        if self.node(cur).op not in SITE_OPS:
            raise NetworkError(f"{name}: input {cur!r} is not on an activation grid")
        return cur

    def site_producer(self, site: str) -> str | None:
        """Conv/FC node whose channels directly feed a relu site (None otherwise)."""
        node = self.node(site)
        if node.op != "relu":
            return None
        src = self.node(node.inputs[0])
        return src.name if src.op in ("conv", "fc") else None

    def check_quantizable(self) -> None:
        for n in self.mappable():
            self.input_site(n.name)
        if any(n.op == "bn" for n in self.nodes):
            raise NetworkError("fold BatchNorm before quantization")

    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def trainable(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    # -- copies and serialization ---------------------------------------------
    def copy(self) -> "Network":
        params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        buffers = {k: v.copy() for k, v in self.buffers.items()}
        return Network(copy.deepcopy(self.nodes), self.input_shape, params, buffers)

    def describe(self) -> dict:
        return {"input": list(self.input_shape), "nodes": [n.to_dict() for n in self.nodes[1:]]}

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": v.data for k, v in self.params.items()}
        out.update({f"buffer/{k}": v for k, v in self.buffers.items()})
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        for k, v in arrays.items():
            kind, _, name = k.partition("/")
            if kind == "param":
                self.params[name] = Tensor(v, requires_grad=True)
            elif kind == "buffer":
                self.buffers[name] = np.array(v)

    # -- transformations -----------------------------------------------------
    def fold_bn(self) -> "Network":
        """Return a copy with every conv/fc -> bn pair folded into the conv/fc."""
        from .quant import fold_bn

        net = self.copy()
        new_nodes, rename = [], {}
        for node in net.nodes:
            node.inputs = tuple(rename.get(i, i) for i in node.inputs)
            if node.op == "bn":
                src = net.node(node.inputs[0])
                if src.op not in ("conv", "fc") or len(net.consumers(src.name)) != 1:
                    raise NetworkError(f"{node.name}: can only fold a BN that is the sole consumer of a conv/fc")
                n = node.name
                w, b = fold_bn(
                    net.params[f"{src.name}.weight"].data,
                    net.params[f"{src.name}.bias"].data if f"{src.name}.bias" in net.params else None,
                    net.params[f"{n}.gamma"].data,
                    net.params[f"{n}.beta"].data,
                    net.buffers[f"{n}.running_mean"],
                    net.buffers[f"{n}.running_var"],
                    node.attrs.get("eps", 1e-5),
                )
                net.params[f"{src.name}.weight"] = Tensor(w, requires_grad=True)
                net.params[f"{src.name}.bias"] = Tensor(b, requires_grad=True)
                for k in ("gamma", "beta"):
                    net.params.pop(f"{n}.{k}")
                for k in ("running_mean", "running_var"):
                    net.buffers.pop(f"{n}.{k}")
                rename[node.name] = src.name
                continue
            new_nodes.append(node)
        return Network(new_nodes, net.input_shape, net.params, net.buffers)


# -- construction -------------------------------------------------------------


def build(description: dict, seed: int = 0, dtype=None) -> Network:
    """Build a network from ``{"input": [C, H, W], "nodes": [...]}`` and initialize it.

    Node entries: ``{"name", "op", "inputs"?, ...attrs}``; ``inputs`` defaults to
    the previous node. Conv attrs: ``out_ch, kernel, stride, padding, groups``;
    FC attrs: ``out_features``. ``in_ch`` / ``in_features`` are inferred.
    """
    allowed = {
        "conv": {"out_ch", "kernel", "stride", "padding", "groups", "in_ch", "bias"},
        "fc": {"out_features", "in_features", "bias"},
        "bn": {"eps", "momentum"},
        "maxpool": {"kernel", "stride"},
    }
    rng = np.random.default_rng(seed)
    nodes = [Node("input", "input")]
    shapes = {"input": tuple(description["input"])}
    params, buffers = {}, {}
    dtype = dtype or np.float32
    prev = "input"
    for entry in description["nodes"]:
        entry = dict(entry)
        name, op = entry.pop("name"), entry.pop("op")
        inputs = tuple(entry.pop("inputs", [prev]))
        unknown = set(entry) - allowed.get(op, set())
        if unknown:
            raise NetworkError(f"{name}: unknown attributes {sorted(unknown)}")
        attrs = dict(entry)
        in_shape = shapes[inputs[0]] if inputs[0] in shapes else None
        if in_shape is None:
            raise NetworkError(f"{name}: input {inputs[0]!r} is not defined earlier")
        if op == "conv":
            attrs["in_ch"] = in_shape[0]
            attrs.setdefault("stride", 1)
            attrs.setdefault("padding", 0)
            attrs.setdefault("groups", 1)
            k, g = attrs["kernel"], attrs["groups"]
            fan_in = attrs["in_ch"] // g * k * k
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (attrs["out_ch"], attrs["in_ch"] // g, k, k))
            params[f"{name}.weight"] = Tensor(w.astype(dtype), requires_grad=True)
            params[f"{name}.bias"] = Tensor(np.zeros(attrs["out_ch"], dtype=dtype), requires_grad=True)
            attrs.pop("bias", None)
        elif op == "fc":
            attrs["in_features"] = int(np.prod(in_shape))
            fan_in = attrs["in_features"]
            w = rng.normal(0.0, np.sqrt(1.0 / fan_in), (attrs["out_features"], fan_in))
            params[f"{name}.weight"] = Tensor(w.astype(dtype), requires_grad=True)
            params[f"{name}.bias"] = Tensor(np.zeros(attrs["out_features"], dtype=dtype), requires_grad=True)
            attrs.pop("bias", None)
        elif op == "bn":
            c = in_shape[0]
            params[f"{name}.gamma"] = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
            params[f"{name}.beta"] = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
            buffers[f"{name}.running_mean"] = np.zeros(c, dtype=np.float64)
            buffers[f"{name}.running_var"] = np.ones(c, dtype=np.float64)
        node = Node(name, op, inputs, attrs)
        nodes.append(node)
        shapes = Network(nodes, description["input"]).shapes
        prev = name
    return Network(nodes, description["input"], params, buffers)


def toy_resnet(in_ch: int = 1, classes: int = 10, width: int = 16) -> dict:
    """Small CNN with one residual block (about 24k parameters at width 16)."""
    w2 = 2 * width
    return {
        "input": [in_ch, 8, 8],
        "nodes": [
            {"name": "conv1", "op": "conv", "out_ch": width, "kernel": 3, "padding": 1},
            {"name": "bn1", "op": "bn"},
            {"name": "relu1", "op": "relu"},
            {"name": "conv2", "op": "conv", "out_ch": w2, "kernel": 3, "stride": 2, "padding": 1},
            {"name": "bn2", "op": "bn"},
            {"name": "relu2", "op": "relu"},
            {"name": "conv3", "op": "conv", "out_ch": w2, "kernel": 3, "padding": 1},
            {"name": "bn3", "op": "bn"},
            {"name": "relu3", "op": "relu"},
            {"name": "conv4", "op": "conv", "out_ch": w2, "kernel": 3, "padding": 1},
            {"name": "bn4", "op": "bn"},
            {"name": "add1", "op": "add", "inputs": ["bn4", "relu2"]},
            {"name": "relu4", "op": "relu"},
            {"name": "gap", "op": "gap"},
            {"name": "fc", "op": "fc", "out_features": classes},
        ],
    }


def toy_cnn2(in_ch: int = 1, classes: int = 2, width: int = 8, size: int = 8) -> dict:
    """Two-layer conv net (conv -> relu -> flatten -> fc)."""
    return {
        "input": [in_ch, size, size],
        "nodes": [
            {"name": "conv1", "op": "conv", "out_ch": width, "kernel": 3, "padding": 1},
            {"name": "relu1", "op": "relu"},
            {"name": "pool1", "op": "maxpool", "kernel": 2},
            {"name": "flat", "op": "flatten"},
            {"name": "fc", "op": "fc", "out_features": classes},
        ],
    }


def toy_mobilenet(in_ch: int = 1, classes: int = 10, width: int = 16) -> dict:
    """Depthwise-separable variant: depthwise layers can only run on some accelerators."""
    return {
        "input": [in_ch, 8, 8],
        "nodes": [
            {"name": "conv1", "op": "conv", "out_ch": width, "kernel": 3, "padding": 1},
            {"name": "relu1", "op": "relu"},
            {"name": "dw2", "op": "conv", "out_ch": width, "kernel": 3, "padding": 1, "groups": width},
            {"name": "relu2", "op": "relu"},
            {"name": "pw2", "op": "conv", "out_ch": 2 * width, "kernel": 1},
            {"name": "relu3", "op": "relu"},
            {"name": "gap", "op": "gap"},
            {"name": "fc", "op": "fc", "out_features": classes},
        ],
    }


ARCHITECTURES = {"toy_resnet": toy_resnet, "toy_cnn2": toy_cnn2, "toy_mobilenet": toy_mobilenet}


def load_description(spec) -> dict:
    """Named architecture (``"toy_resnet"`` or ``{"arch": name, ...kwargs}``) or explicit node list."""
    if isinstance(spec, str):
        if spec in ARCHITECTURES:
            return ARCHITECTURES[spec]()
        return json.loads(spec)
    if "arch" in spec:
        kw = {k: v for k, v in spec.items() if k != "arch"}
        if spec["arch"] not in ARCHITECTURES:
            raise NetworkError(f"unknown architecture {spec['arch']!r}")
        return ARCHITECTURES[spec["arch"]](**kw)
    return spec


# -- execution ----------------------------------------------------------------


class FloatExecutor:
    """Plain float forward pass; BN uses batch statistics when ``training``."""

    def __init__(self, net: Network, training: bool = False):
        self.net = net
        self.training = training

    def weight(self, node: Node) -> Tensor:
        return self.net.params[f"{node.name}.weight"]

    def bias(self, node: Node) -> Tensor | None:
        return self.net.params.get(f"{node.name}.bias")

    def apply_layer(self, node: Node, x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
        if node.op == "fc":
            return ops.linear(x, w, b)
        a = node.attrs
        return ops.conv2d(x, w, b, a.get("stride", 1), a.get("padding", 0), a.get("groups", 1))

    def layer(self, node: Node, x: Tensor) -> Tensor:
        return self.apply_layer(node, x, self.weight(node), self.bias(node))

    def act(self, node: Node, x: Tensor) -> Tensor:
        return x


def run(net: Network, x: Tensor, executor=None) -> Tensor:
    executor = executor or FloatExecutor(net)
    training = getattr(executor, "training", False)
    vals: dict[str, Tensor] = {}
    sites = set(net.quant_sites())
    for node in net.nodes:
        ins = [vals[i] for i in node.inputs]
        op = node.op
        if op == "input":
            y = x
        elif op in ("conv", "fc"):
            y = executor.layer(node, ins[0])
        elif op == "bn":
            n = node.name
            y = ops.batch_norm(
                ins[0], net.params[f"{n}.gamma"], net.params[f"{n}.beta"],
                net.buffers[f"{n}.running_mean"], net.buffers[f"{n}.running_var"],
                training, node.attrs.get("momentum", 0.1), node.attrs.get("eps", 1e-5),
            )
        elif op == "relu":
            y = ins[0].relu()
        elif op == "add":
            y = ins[0]
            for other in ins[1:]:
                y = ops.add(y, other)
        elif op == "maxpool":
            y = ops.max_pool2d(ins[0], node.attrs["kernel"], node.attrs.get("stride"))
        elif op == "gap":
            y = ops.global_avg_pool(ins[0])
        elif op == "flatten":
            y = ops.flatten(ins[0])
        else:  # pragma: no cover - guarded by validation
            raise NetworkError(op)
        if node.name in sites:
            y = executor.act(node, y)
        vals[node.name] = y
    return vals[net.output]
