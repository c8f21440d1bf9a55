"""Channel reordering and layer splitting after discretization.

Output channels of every Conv/FC layer are permuted so that channels mapped
to the same accelerator are contiguous; consumers' input channels are
permuted to compensate, so the network computes the same function. Each
layer then splits into contiguous sub-layers, one per run of equal
accelerator index.

Tensors whose channel order is tied together (through ReLU, pooling,
flatten, depthwise convolutions and residual adds) form one *channel group*
sharing a single permutation, taken from the group's first Conv/FC producer.
Groups containing the network input or the logits keep the identity order;
their producers may then need more than one sub-layer per accelerator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .mapping import MappingDecision
from .network import Network
from .tensor import Tensor


class ReorderError(ValueError):
    pass


class ChannelPermutation:
    """``perm[k]`` is the original index of the channel stored at position ``k``."""

    def __init__(self, perm):
        p = np.asarray(perm, dtype=np.int64)
        if p.ndim != 1 or not np.array_equal(np.sort(p), np.arange(len(p))):
            raise ReorderError("not a permutation")
        self.perm = p
        self.inverse = np.argsort(p, kind="stable")

    def __len__(self) -> int:
        return len(self.perm)

    def __eq__(self, other) -> bool:
        return isinstance(other, ChannelPermutation) and np.array_equal(self.perm, other.perm)

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.perm, np.arange(len(self.perm))))

    def apply(self, values, axis: int = 0):
        return np.take(values, self.perm, axis=axis)

    @classmethod
    def identity(cls, n: int) -> "ChannelPermutation":
        return cls(np.arange(n))


def plan_permutation(assignments) -> ChannelPermutation:
    """Stable sort of channels by accelerator index."""
    return ChannelPermutation(np.argsort(np.asarray(assignments), kind="stable"))


def runs(assignments) -> list[tuple[int, int, int]]:
    """Maximal runs ``(accelerator, start, stop)`` of equal consecutive values."""
    a = np.asarray(assignments)
    if a.size == 0:
        return []
    cut = np.flatnonzero(np.diff(a)) + 1
    starts = np.concatenate([[0], cut])
    stops = np.concatenate([cut, [a.size]])
    return [(int(a[s]), int(s), int(e)) for s, e in zip(starts, stops)]


@dataclass
class SubLayer:
    layer: str
    accelerator: int
    start: int
    stop: int

    @property
    def channels(self) -> int:
        return self.stop - self.start


def split_layer(layer: str, assignments) -> list[SubLayer]:
    """Contiguous output-channel slices of one (reordered) layer."""
    return [SubLayer(layer, acc, s, e) for acc, s, e in runs(assignments)]


@dataclass
class ReorderResult:
    net: Network
    decision: MappingDecision
    permutations: dict[str, ChannelPermutation]
    plan: dict[str, list[SubLayer]]
    groups: list[dict] = field(default_factory=list)
    gather_used: bool = False

    def noncontiguous(self) -> list[str]:
        """Layers needing more than one sub-layer for some accelerator."""
        out = []
        for name, subs in self.plan.items():
            accs = [s.accelerator for s in subs]
            if len(accs) != len(set(accs)):
                out.append(name)
        return out

    def manifest(self) -> dict:
        return {
            "format": "odimo-split/1",
            "gather_used": self.gather_used,
            "groups": self.groups,
            "layers": [
                {
                    "name": name,
                    "permutation": self.permutations[name].perm.tolist(),
                    "sublayers": [
                        {"accelerator": s.accelerator, "start": s.start, "stop": s.stop} for s in subs
                    ],
                }
                for name, subs in self.plan.items()
            ],
            "network": self.net.describe(),
        }

    def save_manifest(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.manifest(), fh, indent=1)
            fh.write("\n")


# -- channel groups -------------------------------------------------------------

_SAME_CHANNELS = ("relu", "maxpool", "gap", "flatten", "bn")


def _is_depthwise(net: Network, name: str) -> bool:
    node = net.node(name)
    return node.op == "conv" and net.layer_kind(node) == "depthwise"


def channel_groups(net: Network) -> dict[str, str]:
    """Map each node to the root of the channel group of its output tensor."""
    parent = {n.name: n.name for n in net.nodes}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            # keep the topologically earlier root
            first = min(ra, rb, key=order.__getitem__)
            parent[ra] = parent[rb] = first

    order = {n.name: i for i, n in enumerate(net.nodes)}
    for node in net.nodes:
        if node.op in _SAME_CHANNELS or (node.op == "conv" and _is_depthwise(net, node.name)):
            union(node.name, node.inputs[0])
        elif node.op == "add":
            for other in node.inputs:
                union(node.name, other)
    return {n.name: find(n.name) for n in net.nodes}


def _consumer_expansion(net: Network, consumer: str) -> int:
    """Input features per channel seen by an FC consumer (spatial size after flatten)."""
    node = net.node(consumer)
    src = net.node(node.inputs[0])
    if node.op == "fc" and src.op == "flatten":
        shape = net.shapes[src.inputs[0]]
        return int(np.prod(shape[1:]))
    return 1


# -- the transformation ----------------------------------------------------------


def apply_reorder(net: Network, decision: MappingDecision) -> ReorderResult:
    """Permute channels so that same-accelerator channels are contiguous.

    Returns a new network (parameters permuted, structure unchanged), the
    decision expressed in the new channel order, the permutation applied to
    each layer's outputs and the split plan. Every consumer in the supported
    op set absorbs its permutation, so no gather op is ever inserted
    (``gather_used`` stays False); a layout that cannot absorb one raises.
    """
    if any(n.op == "bn" for n in net.nodes):
        raise ReorderError("fold BatchNorm before reordering")
    groups = channel_groups(net)
    order = [n.name for n in net.nodes]
    members: dict[str, list[str]] = {}
    for name in order:
        members.setdefault(groups[name], []).append(name)

    out_perm: dict[str, ChannelPermutation] = {}
    group_info = []
    for root, names in members.items():
        producers = [n for n in names if net.node(n).op in ("conv", "fc")]
        if not producers:
            continue
        c = net.layer_spec(producers[0]).c_out
        fixed = net.node(root).op == "input" or net.output in names
        primary = next((p for p in producers if not _is_depthwise(net, p)), producers[0])
        if fixed:
            perm = ChannelPermutation.identity(c)
        else:
            perm = plan_permutation(decision.assignments[primary])
        for p in producers:
            out_perm[p] = perm
        group_info.append({"root": root, "producers": producers, "primary": None if fixed else primary, "fixed": fixed})

    new = net.copy()
    for name, perm in out_perm.items():
        if perm.is_identity():
            continue
        for suffix in ("weight", "bias"):
            key = f"{name}.{suffix}"
            if key in new.params:
                new.params[key] = Tensor(perm.apply(new.params[key].data, 0), requires_grad=True)

    # consumers: any non-depthwise conv/fc reading a permuted group
    for node in net.mappable():
        if _is_depthwise(net, node.name):
            continue
        src_root = groups[node.inputs[0]]
        producers = [p for p in members[src_root] if p in out_perm]
        if not producers:
            continue
        perm = out_perm[producers[0]]
        if perm.is_identity():
            continue
        expand = _consumer_expansion(net, node.name)
        idx = (perm.perm[:, None] * expand + np.arange(expand)[None, :]).ravel()
        key = f"{node.name}.weight"
        w = new.params[key].data
        if w.shape[1] != idx.size:
            raise ReorderError(f"{node.name}: cannot absorb a permutation of {len(perm)} channels into {w.shape[1]} inputs")
        new.params[key] = Tensor(np.take(w, idx, axis=1), requires_grad=True)

    assignments = {name: out_perm[name].apply(a) for name, a in decision.assignments.items()}
    perms = {name: out_perm[name].perm for name in decision.assignments}
    new_decision = MappingDecision(assignments, list(decision.accelerators), perms)
    plan = {name: split_layer(name, a) for name, a in assignments.items()}
    return ReorderResult(new, new_decision, {k: out_perm[k] for k in decision.assignments}, plan, group_info)
