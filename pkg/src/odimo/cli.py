"""Command-line driver: ``odimo <subcommand> [options]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, hardware, pipeline
from .data import gen_synthetic, save_dataset
from .mapping import MappingDecision
from .network import build
from .reorder import apply_reorder, split_layer
from .search import AlphaParams, QuantState, SearchState, discretize, finetune
from .simulate import breakdown_csv, cost_report, simulate, utilization_breakdown

log = logging.getLogger("odimo")


def _parse_lambdas(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"--lambda expects comma-separated numbers: {exc}") from exc


def _config(args) -> pipeline.RunConfig:
    if args.config:
        cfg = pipeline.RunConfig.load(args.config)
    else:
        cfg = pipeline.RunConfig()
    overrides = {}
    if args.objective:
        overrides["objective"] = args.objective
    if args.lambdas is not None:
        overrides["lambdas"] = args.lambdas
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
    if args.out:
        overrides["out"] = str(Path(args.out).resolve())
    if overrides:
        d = {**cfg.to_dict(), **overrides}
        cfg = pipeline.RunConfig.from_dict(d, cfg.base_dir)
    return cfg


def _outdir(cfg, sub: str | None = None) -> Path:
    out = cfg.resolve(cfg.out)
    if sub:
        out = out / sub
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_metadata(out: Path, command: str, started: float) -> None:
    # wall-clock data lives here so the other artifacts stay byte-identical across reruns
    meta = {
        "command": command,
        "started_unix": started,
        "finished_unix": time.time(),
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    (out / "metadata.json").write_text(json.dumps(meta, indent=1) + "\n")


# -- subcommands ------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    ds = gen_synthetic(args.classes, args.n, args.size, args.seed if args.seed is not None else 0, args.noise)
    save_dataset(ds, args.out or "data")
    print(f"wrote {len(ds.y_train)} train / {len(ds.y_val)} val samples of shape {ds.shape} to {args.out or 'data'}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    ds = cfg.data()
    seed = cfg.seeds[0]
    net = pipeline.pretrained(cfg, ds, seed)
    out = _outdir(cfg, "pretrained")
    pipeline.save_model(out, net, meta={"seed": seed})
    print(f"pretrained float model saved to {out}")
    return 0


def _load_pretrained(cfg, args):
    path = Path(args.checkpoint) if args.checkpoint else cfg.resolve(cfg.out) / "pretrained"
    return pipeline.load_model(path)[0]


def cmd_search(args) -> int:
    cfg = _config(args)
    ds = cfg.data()
    seed, lam = cfg.seeds[0], cfg.lambdas[0]
    state = pipeline.run_search(cfg, ds, _load_pretrained(cfg, args), lam, seed)
    out = _outdir(cfg, "search")
    pipeline.save_model(
        out, state.net, state.quant, state.alpha.state_arrays(),
        meta={"lambda": lam, "objective": cfg.objective, "tau": state.alpha.tau, "betas": state.betas},
    )
    (out / "history.json").write_text(json.dumps(state.history, indent=1) + "\n")
    print(f"search state (lambda={lam}) saved to {out}")
    return 0


def cmd_discretize(args) -> int:
    cfg = _config(args)
    src = Path(args.checkpoint) if args.checkpoint else cfg.resolve(cfg.out) / "search"
    net, quant, extra, meta = pipeline.load_model(src)
    accs = cfg.accelerator_specs()
    alpha = AlphaParams(net, accs, meta.get("tau", 1.0))
    alpha.load_state_arrays(extra)
    state = SearchState(net, accs, alpha, quant, meta.get("lambda", 0.0), meta.get("objective", "latency"), meta.get("betas") or {})
    decision = discretize(state)
    result = apply_reorder(net, decision)
    out = _outdir(cfg, "discretized")
    decision.save(out / "mapping.json")
    result.decision.save(out / "mapping_reordered.json")
    result.save_manifest(out / "split.json")
    pipeline.save_model(out / "model", result.net, quant)
    print(f"mapping and reordered model written to {out}")
    return 0


def _mapped_inputs(cfg, args, default_sub: str):
    src = Path(args.checkpoint) if args.checkpoint else cfg.resolve(cfg.out) / default_sub / "model"
    net, quant, _, meta = pipeline.load_model(src)
    if args.mapping:
        decision = MappingDecision.load(args.mapping)
    elif "mapping" in meta:
        decision = MappingDecision.from_dict(meta["mapping"])
    else:
        decision = MappingDecision.load(src.parent / "mapping_reordered.json")
    return net, quant, decision


def cmd_finetune(args) -> int:
    cfg = _config(args)
    ds = cfg.data()
    net, quant, decision = _mapped_inputs(cfg, args, "discretized")
    accs = cfg.accelerator_specs()
    if quant is None:
        quant = QuantState.init(net, accs, ds.x_train[: cfg.calib_samples])
    history = finetune(net, quant, decision, accs, ds, cfg.finetune.replace(seed=cfg.seeds[0]))
    out = _outdir(cfg, "finetuned")
    pipeline.save_model(out / "model", net, quant, meta={"mapping": decision.to_dict()})
    (out / "history.json").write_text(json.dumps(history, indent=1) + "\n")
    print(f"fine-tuned model written to {out / 'model'}")
    return 0


def cmd_simulate(args) -> int:
    cfg = _config(args)
    ds = cfg.data()
    net, quant, decision = _mapped_inputs(cfg, args, "finetuned")
    accs = cfg.accelerator_specs()
    if quant is None:
        quant = QuantState.init(net, accs, ds.x_train[: cfg.calib_samples])
    plan = {name: split_layer(name, a) for name, a in decision.assignments.items()}
    report = simulate(net, decision, accs, quant, ds.x_val, ds.y_val, plan)
    out = _outdir(cfg, "simulated")
    report.save(out / "report.json")
    (out / "utilization.csv").write_text(breakdown_csv(utilization_breakdown(net, decision, accs)))
    print(json.dumps({k: v for k, v in report.to_dict().items() if k != "layers"}, indent=1, sort_keys=True))
    return 0


def cmd_baseline(args) -> int:
    cfg = _config(args)
    accs = cfg.accelerator_specs()
    out = _outdir(cfg, f"baseline_{args.kind}")
    if args.train:
        ds = cfg.data()
        seed = cfg.seeds[0]
        report = pipeline.run_baseline(cfg, ds, pipeline.pretrained(cfg, ds, seed), args.kind, seed, out)
        print(json.dumps({k: v for k, v in report.to_dict().items() if k != "layers"}, indent=1, sort_keys=True))
        return 0
    net = build(cfg.description(), seed=0).fold_bn()
    decision = pipeline.baseline_decision(args.kind, net, accs, cfg.objective)
    decision.save(out / "mapping.json")
    report = cost_report(net, decision, accs)
    report.save(out / "report.json")
    print(f"{args.kind}: latency {report.latency_cycles} cycles, energy {report.energy_units:.4f}, "
          f"analog channels {report.analog_channel_pct:.2f}%")
    return 0


def cmd_sweep(args) -> int:
    started = time.time()
    cfg = _config(args)
    rows = pipeline.sweep(cfg, jobs=args.jobs)
    out = cfg.resolve(cfg.out)
    _write_metadata(out, "sweep", started)
    failed = [r for r in rows if r[6] != "ok"]
    print(f"{len(rows)} runs ({len(failed)} failed); results in {out / 'pareto.csv'}")
    return 1 if failed and len(failed) == len(rows) else 0


def cmd_cost_eval(args) -> int:
    accs = hardware.load_accelerators(args.accelerators) if args.accelerators else hardware.diana_accelerators()
    if args.table:
        with open(args.table) as fh:
            rows = list(csv.DictReader(fh))
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["c_in", "f_x", "f_y", "o_x", "o_y", "c_out"] + [f"lat_{a.name}" for a in accs])
        for r in rows:
            dims = [int(r[k]) for k in ("c_in", "f_x", "f_y", "o_x", "o_y", "c_out")]
            layer = hardware.LayerSpec(dims[0], max(dims[5], 1), dims[1], dims[2], dims[3], dims[4])
            w.writerow(dims + [a.latency(layer, dims[5]) for a in accs])
        return 0
    layer = hardware.LayerSpec(args.c_in, args.c_out, args.f, args.f, args.o, args.o, kind=args.kind)
    counts = args.split or [args.c_out] + [0] * (len(accs) - 1)
    for a in accs:
        print(f"{a.name}: {a.latency(layer, args.c_out)} cycles for all {args.c_out} channels")
    if args.split:
        m, lats = hardware.layer_latency(layer, counts, accs)
        print(f"split {counts}: per-accelerator {lats}, layer latency {m}, energy {hardware.layer_energy(layer, counts, accs)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (JSON)")
    common.add_argument("--objective", choices=["latency", "energy"])
    common.add_argument("--lambda", dest="lambdas", type=_parse_lambdas, help="comma-separated regularization strengths")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int, default=1)
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="odimo", description="Differentiable channel-to-accelerator mapping")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--n", type=int, default=4000)
    g.add_argument("--size", type=int, default=8)
    g.add_argument("--noise", type=float, default=0.2)
    g.set_defaults(func=cmd_gen_data)

    sub.add_parser("pretrain", parents=[common], help="float training with BatchNorm").set_defaults(func=cmd_pretrain)
    for name, func, helptext in (
        ("search", cmd_search, "joint weight/mapping search for one lambda"),
        ("discretize", cmd_discretize, "argmax mapping, channel reorder and split plan"),
        ("finetune", cmd_finetune, "quantization-aware fine-tuning of a fixed mapping"),
        ("simulate", cmd_simulate, "integer-faithful accuracy and cost report"),
    ):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--checkpoint", help="input checkpoint directory")
        if name in ("finetune", "simulate"):
            s.add_argument("--mapping", help="mapping JSON (defaults to the one stored with the checkpoint)")
        s.set_defaults(func=func)

    b = sub.add_parser("baseline", parents=[common], help="reference mappings")
    b.add_argument("kind", choices=pipeline.BASELINES)
    b.add_argument("--train", action="store_true", help="also pretrain, fine-tune and simulate")
    b.set_defaults(func=cmd_baseline)

    sub.add_parser("sweep", parents=[common], help="lambda x seed sweep with Pareto front").set_defaults(func=cmd_sweep)

    c = sub.add_parser("cost-eval", help="exact model cycles for one layer or a CSV table of layers")
    c.add_argument("--accelerators", help="accelerator INI file (default: DIANA presets)")
    c.add_argument("--table", help="CSV with c_in,f_x,f_y,o_x,o_y,c_out columns")
    c.add_argument("--c-in", type=int, default=1)
    c.add_argument("--c-out", type=int, default=1)
    c.add_argument("--f", type=int, default=1, help="square filter size")
    c.add_argument("--o", type=int, default=1, help="square output size")
    c.add_argument("--kind", default="conv", choices=hardware.LAYER_KINDS)
    c.add_argument("--split", type=lambda s: [int(v) for v in s.split(",")], help="channel counts per accelerator")
    c.set_defaults(func=cmd_cost_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (pipeline.ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"odimo: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
