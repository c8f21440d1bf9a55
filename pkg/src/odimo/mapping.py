"""Per-channel accelerator assignments and their JSON form."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class MappingError(ValueError):
    pass


@dataclass
class MappingDecision:
    """Accelerator index for every output channel of every Conv/FC layer.

    ``assignments`` preserves layer order. ``permutations`` is filled in by the
    reorder pass: ``perm[k]`` is the original channel now stored at position ``k``.
    """

    assignments: dict[str, np.ndarray]
    accelerators: list[str] = field(default_factory=list)
    permutations: dict[str, np.ndarray] | None = None

    def __post_init__(self):
        self.assignments = {k: np.asarray(v, dtype=np.int64) for k, v in self.assignments.items()}

    def counts(self, layer: str, n_acc: int | None = None) -> list[int]:
        n_acc = n_acc or len(self.accelerators)
        return np.bincount(self.assignments[layer], minlength=n_acc).tolist()

    def layers(self) -> list[str]:
        return list(self.assignments)

    def validate(self, net, accs) -> None:
        """Check layer coverage, channel counts and layer-kind support."""
        expected = [n.name for n in net.mappable()]
        if sorted(expected) != sorted(self.assignments):
            raise MappingError(f"decision covers {sorted(self.assignments)}, network has {sorted(expected)}")
        for name in expected:
            a = self.assignments[name]
            spec = net.layer_spec(name)
            if a.shape != (spec.c_out,):
                raise MappingError(f"{name}: {a.shape[0]} assignments for {spec.c_out} channels")
            if a.min(initial=0) < 0 or a.max(initial=0) >= len(accs):
                raise MappingError(f"{name}: accelerator index out of range")
            for i in np.unique(a):
                if not accs[i].supports(spec.kind):
                    raise MappingError(f"{name}: {accs[i].name} cannot run {spec.kind} layers")

    def to_dict(self) -> dict:
        out = {
            "accelerators": list(self.accelerators),
            "layers": [{"name": k, "assignments": v.tolist()} for k, v in self.assignments.items()],
        }
        if self.permutations is not None:
            for entry in out["layers"]:
                if entry["name"] in self.permutations:
                    entry["permutation"] = self.permutations[entry["name"]].tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "MappingDecision":
        try:
            layers = d["layers"]
            assignments = {e["name"]: e["assignments"] for e in layers}
        except (KeyError, TypeError) as exc:
            raise MappingError(f"malformed mapping document: {exc}") from exc
        perms = {e["name"]: np.asarray(e["permutation"], dtype=np.int64) for e in layers if "permutation" in e}
        return cls(assignments, list(d.get("accelerators", [])), perms or None)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps() + "\n")

    @classmethod
    def load(cls, path) -> "MappingDecision":
        return cls.from_dict(json.loads(Path(path).read_text()))


def uniform_decision(net, accs, index: int) -> MappingDecision:
    return MappingDecision(
        {n.name: np.full(net.layer_spec(n.name).c_out, index) for n in net.mappable()},
        [a.name for a in accs],
    )


def log10_search_space(net, n_acc: int, layers=None) -> float:
    """log10 of the number of channel-to-accelerator assignments (N ** total channels)."""
    names = layers or [n.name for n in net.mappable()]
    total = sum(net.layer_spec(n).c_out for n in names)
    return total * float(np.log10(n_acc))
