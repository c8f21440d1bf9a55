"""Run configuration and the end-to-end workflows shared by the CLI and the sweep.

One run: pretrain (float, with BN) -> fold BN -> search -> discretize ->
reorder/split -> fine-tune -> simulate. Every random choice derives from the
run seed, so identical configurations give byte-identical artifacts.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import baselines, hardware
from .data import Dataset, gen_synthetic, load_dataset
from .mapping import MappingDecision
from .network import Network, build, load_description
from .reorder import apply_reorder
from .search import QuantState, TrainConfig, discretize, finetune, new_state, pretrain, search
from .serialize import load_checkpoint, save_checkpoint
from .simulate import breakdown_csv, simulate, utilization_breakdown

log = logging.getLogger(__name__)

PARETO_HEADER = ["lambda", "seed", "accuracy", "latency_cycles", "energy_units", "analog_ch_pct", "status"]
ACCELERATOR_PRESETS = ("diana", "abstract-active", "abstract-zero")
BASELINES = ("all8", "allternary", "io8", "mincost")


class ConfigError(ValueError):
    pass


def _train_cfg(d: dict | None, where: str, **defaults) -> TrainConfig:
    d = dict(d or {})
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    return TrainConfig(**{**defaults, **d})


@dataclass
class RunConfig:
    """Validated run configuration (JSON document; unknown keys rejected).

    ``accelerators`` is a preset name or a path to an INI file. ``dataset`` is
    a dataset directory; when null a synthetic set is generated from
    ``synthetic`` and the run seed's data seed ``data_seed``.
    """

    network: object = "toy_resnet"
    accelerators: str = "diana"
    objective: str = "latency"
    lambdas: list = field(default_factory=lambda: [0.0])
    seeds: list = field(default_factory=lambda: [0])
    dataset: str | None = None
    synthetic: dict = field(default_factory=lambda: {"classes": 10, "n": 4000, "size": 8})
    data_seed: int = 0
    calib_samples: int = 256
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=12, lr_w=0.05))
    search: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=10, metric="objective"))
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=6, lr_w=0.005))
    out: str = "runs"
    base_dir: str = "."

    def __post_init__(self):
        if self.objective not in ("latency", "energy"):
            raise ConfigError(f"objective must be 'latency' or 'energy', got {self.objective!r}")
        self.lambdas = [float(v) for v in self.lambdas]
        if not self.lambdas or any(v < 0 for v in self.lambdas):
            raise ConfigError("lambdas must be a non-empty list of non-negative numbers")
        self.seeds = [int(s) for s in self.seeds]
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        unknown = set(self.synthetic) - {"classes", "n", "size", "noise", "val_fraction"}
        if unknown:
            raise ConfigError(f"synthetic: unknown keys {sorted(unknown)}")
        self.accelerator_specs()
        self.description()

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "RunConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)} - {"base_dir"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        phases = {
            "pretrain": dict(epochs=12, lr_w=0.05),
            "search": dict(epochs=10, metric="objective"),
            "finetune": dict(epochs=6, lr_w=0.005),
        }
        for key, defaults in phases.items():
            d[key] = _train_cfg(d.get(key), key, **defaults)
        return cls(**d, base_dir=str(base_dir))

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from exc
        return cls.from_dict(doc, base_dir=p.parent)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            if f.name == "base_dir":
                continue
            v = getattr(self, f.name)
            out[f.name] = v.__dict__.copy() if isinstance(v, TrainConfig) else copy.deepcopy(v)
        return out

    def resolve(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else Path(self.base_dir) / q

    def accelerator_specs(self) -> list:
        a = self.accelerators
        if a == "diana":
            return hardware.diana_accelerators()
        if a == "abstract-active":
            return hardware.abstract_accelerators("active")
        if a == "abstract-zero":
            return hardware.abstract_accelerators("zero")
        path = self.resolve(a)
        if not path.exists():
            raise ConfigError(f"accelerators: {a!r} is neither a preset {ACCELERATOR_PRESETS} nor a file")
        return hardware.load_accelerators(path)

    def description(self) -> dict:
        try:
            return load_description(self.network)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"network: {exc}") from exc

    def data(self) -> Dataset:
        if self.dataset is not None:
            return load_dataset(self.resolve(self.dataset))
        return gen_synthetic(seed=self.data_seed, **self.synthetic)


# -- checkpoints ------------------------------------------------------------------


def save_model(directory, net: Network, quant: QuantState | None = None, extra: dict | None = None, meta=None) -> None:
    tensors = dict(net.state_arrays())
    if quant is not None:
        tensors.update({f"quant/{k}": v for k, v in quant.state_arrays().items()})
    tensors.update(extra or {})
    save_checkpoint(directory, tensors, {"network": net.describe(), **(meta or {})})


def load_model(directory) -> tuple[Network, QuantState | None, dict, dict]:
    tensors, meta = load_checkpoint(directory)
    net = build(meta["network"], seed=0)
    net.load_state_arrays({k: v for k, v in tensors.items() if k.startswith(("param/", "buffer/"))})
    qa = {k[6:]: v for k, v in tensors.items() if k.startswith("quant/")}
    quant = QuantState.from_arrays(qa) if qa else None
    rest = {k: v for k, v in tensors.items() if not k.startswith(("param/", "buffer/", "quant/"))}
    return net, quant, rest, meta


# -- workflows ---------------------------------------------------------------------


def pretrained(cfg: RunConfig, ds: Dataset, seed: int) -> Network:
    net = build(cfg.description(), seed=seed)
    pretrain(net, ds, cfg.pretrain.replace(seed=seed))
    return net


def _calib(cfg: RunConfig, ds: Dataset) -> np.ndarray:
    return ds.x_train[: cfg.calib_samples]


def run_search(cfg: RunConfig, ds: Dataset, float_net: Network, lam: float, seed: int):
    accs = cfg.accelerator_specs()
    state = new_state(float_net.fold_bn(), accs, lam, cfg.objective, cfg.search.tau, _calib(cfg, ds))
    search(state, ds, cfg.search.replace(seed=seed))
    return state


def finish(cfg: RunConfig, ds: Dataset, net: Network, quant: QuantState, decision: MappingDecision, seed: int, out: Path | None):
    """Reorder, fine-tune and simulate a discretized mapping; writes artifacts to ``out``."""
    accs = cfg.accelerator_specs()
    result = apply_reorder(net, decision)
    finetune(result.net, quant, result.decision, accs, ds, cfg.finetune.replace(seed=seed))
    report = simulate(result.net, result.decision, accs, quant, ds.x_val, ds.y_val, result.plan)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        decision.save(out / "mapping.json")
        result.save_manifest(out / "split.json")
        report.save(out / "report.json")
        (out / "utilization.csv").write_text(breakdown_csv(utilization_breakdown(result.net, result.decision, accs)))
        save_model(out / "model", result.net, quant, meta={"mapping": result.decision.to_dict()})
    return report, result


def baseline_decision(kind: str, net: Network, accs, objective: str = "latency") -> MappingDecision:
    hi = hardware.high_precision_index(accs)
    bits = [a.weight_bits for a in accs]
    lo = bits.index(min(bits))
    if kind == "all8":
        return baselines.all_single(net, accs, hi)
    if kind == "allternary":
        return baselines.all_single(net, accs, lo)
    if kind == "io8":
        return baselines.io8_backbone_ternary(net, accs, lo, hi)
    if kind == "mincost":
        return baselines.min_cost(net, accs, objective)
    raise ConfigError(f"unknown baseline {kind!r}; choose from {BASELINES}")


def run_baseline(cfg: RunConfig, ds: Dataset, float_net: Network, kind: str, seed: int, out: Path | None = None):
    accs = cfg.accelerator_specs()
    net = float_net.fold_bn()
    decision = baseline_decision(kind, net, accs, cfg.objective)
    quant = QuantState.init(net, accs, _calib(cfg, ds))
    return finish(cfg, ds, net, quant, decision, seed, out)[0]


def run_one(cfg: RunConfig, ds: Dataset, float_net: Network, lam: float, seed: int, out: Path | None = None):
    state = run_search(cfg, ds, float_net, lam, seed)
    decision = discretize(state)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "search_history.json").write_text(json.dumps(state.history, indent=1) + "\n")
    report, _ = finish(cfg, ds, state.net, state.quant, decision, seed, out)
    return report, decision


# -- sweep ------------------------------------------------------------------------------


def fmt(v) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() else f"{v:.4f}"


def _job(args):
    cfg_dict, base_dir, lam, seed, out, pre_dir = args
    cfg = RunConfig.from_dict(cfg_dict, base_dir)
    ds = cfg.data()
    net = load_model(pre_dir)[0]
    try:
        report, _ = run_one(cfg, ds, net, lam, seed, Path(out))
        return [lam, seed, report.accuracy, report.latency_cycles, report.energy_units, report.analog_channel_pct, "ok"]
    except Exception as exc:  # recorded in the CSV, the sweep continues
        log.exception("run lambda=%s seed=%s failed", lam, seed)
        return [lam, seed, float("nan"), float("nan"), float("nan"), float("nan"), f"failed: {type(exc).__name__}: {exc}"]


def run_dirname(lam: float, seed: int) -> str:
    return f"lam_{lam:.3e}_seed_{seed}"


def pareto_rows_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PARETO_HEADER)
    for r in rows:
        lam, seed, acc, lat, en, an, status = r
        w.writerow([repr(float(lam)), seed, f"{acc:.4f}", fmt(lat), f"{en:.4f}", f"{an:.4f}", status])
    return buf.getvalue()


def pareto_front(rows, objective: str = "latency") -> list:
    """Rows not dominated in (higher accuracy, lower cost); failed rows excluded."""
    ok = [r for r in rows if r[6] == "ok"]
    ci = 3 if objective == "latency" else 4
    front = []
    for r in ok:
        dominated = any(
            (o[2] >= r[2] and o[ci] <= r[ci]) and (o[2] > r[2] or o[ci] < r[ci]) for o in ok
        )
        if not dominated:
            front.append(r)
    return front


def sweep(cfg: RunConfig, jobs: int = 1) -> list:
    """Every (lambda, seed) run; writes pareto.csv and pareto_front.csv into ``cfg.out``."""
    out = cfg.resolve(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = cfg.data()
    tasks = []
    for seed in cfg.seeds:
        pre_dir = out / f"pretrained_seed_{seed}"
        if not (pre_dir / "manifest.json").exists():
            save_model(pre_dir, pretrained(cfg, ds, seed))
        for lam in cfg.lambdas:
            tasks.append((cfg.to_dict(), cfg.base_dir, lam, seed, str(out / run_dirname(lam, seed)), str(pre_dir)))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_job, tasks))
    else:
        rows = [_job(t) for t in tasks]
    (out / "pareto.csv").write_text(pareto_rows_csv(rows))
    (out / "pareto_front.csv").write_text(pareto_rows_csv(pareto_front(rows, cfg.objective)))
    return rows
