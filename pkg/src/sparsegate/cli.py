"""Command-line interface.

Every subcommand reads and writes only files, so each one runs standalone
given its input artifacts.  ``run`` chains them into the full pipeline.
"""
from __future__ import annotations

import argparse
import csv
import logging
import re
import sys
from dataclasses import replace
from pathlib import Path

from . import flops as flops_mod
from .config import RunConfig, load_config
from .errors import ConfigError, SparsegateError
from .mgs import (THRESHOLD_GRID, GateTrainConfig, evaluate_gated, load_gate, save_gate,
                  train_gate, tune_thresholds)
from .model import layer_inputs, load_checkpoint, save_checkpoint
from .profiler import collect_traces, load_trace, mask_study, save_trace, sparsity_stats
from .sibs import evaluate_sibs, greedy_cover, load_table, mine_implications, save_table
from .toytrain import (DatasetSpec, TrainConfig, generate_dataset, init_base, load_dataset,
                       save_dataset, train_base)

log = logging.getLogger("sparsegate")

EXIT_MISSING_FILE = 3


def _f(v: float) -> str:
    return f"{v:.6f}"


def write_csv(path, header, rows) -> None:
    if path is None or str(path) == "-":
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        return
    with open(_prep(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _prep(path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _load_data(path, limit=None):
    data = load_dataset(path)
    return data.subset(0, limit) if limit else data


def _parse_layers(spec, count: int) -> list[int]:
    if spec in (None, "all"):
        return list(range(count))
    return [int(p) for p in str(spec).split(",") if p.strip()]


def _parse_thresholds(spec, count: int) -> list[float]:
    p = Path(str(spec))
    text = p.read_text() if p.is_file() else str(spec)
    values = [float(v) for v in re.split(r"[,\s]+", text.strip()) if v]
    if len(values) == 1:
        values = values * count
    if len(values) != count:
        raise ConfigError(f"need 1 or {count} thresholds, got {len(values)}")
    return values


def _load_gates(gate_dir, count: int, thresholds=None) -> list:
    gates = [None] * count
    for path in sorted(Path(gate_dir).glob("*.mgsg")):
        gate = load_gate(path)
        if gate.layer >= count:
            raise ConfigError(f"{path}: gate layer {gate.layer} beyond model depth {count}")
        gates[gate.layer] = gate
    if not any(g is not None for g in gates):
        raise FileNotFoundError(f"no .mgsg gate files in {gate_dir}")
    if thresholds is not None:
        gates = [g.with_threshold(t) if g is not None else None for g, t in zip(gates, thresholds)]
    return gates


def _table_budget(path: Path, table) -> int:
    m = re.search(r"_b(\d+)", path.stem)
    return int(m.group(1)) if m else len(table.indicators)


# -- subcommands --------------------------------------------------------------

def cmd_gen_data(a) -> None:
    spec = DatasetSpec(d=a.d, components=a.components, teacher_f=a.f, teacher_layers=a.layers,
                       teacher_bias_shift=a.bias_shift, seed=a.spec_seed)
    save_dataset(generate_dataset(spec, a.n_samples, a.seed), _prep(a.out))


def cmd_train_base(a) -> None:
    if a.data:
        data = load_dataset(a.data)
    else:
        spec = DatasetSpec(d=a.d, teacher_f=a.f, teacher_layers=a.layers,
                           teacher_bias_shift=a.bias_shift, seed=a.data_seed)
        data = generate_dataset(spec, a.n_train, a.data_seed + 1)
    if data.d != a.d:
        raise ConfigError(f"data width {data.d} != --d {a.d}")
    cfg = TrainConfig(learning_rate=a.lr, epochs=a.epochs, batch_size=a.batch_size, seed=a.seed,
                      sparsity_bias_shift=a.bias_shift)
    model = init_base(a.d, a.f, a.layers, a.seed, a.bias_shift)
    model, curve = train_base(model, data, cfg)
    save_checkpoint(model, _prep(a.out))
    if a.loss_out:
        write_csv(a.loss_out, ["epoch", "mse"], [[i, _f(v)] for i, v in enumerate(curve)])


def cmd_profile(a) -> None:
    model = load_checkpoint(a.checkpoint)
    data = _load_data(a.data, a.limit)
    layers = _parse_layers(a.layers, model.layer_count)
    if a.mask:
        rows = []
        for r in mask_study(model, data, a.mask, [float(v) for v in a.level.split(",")],
                            seeds=[int(s) for s in a.seeds.split(",")]):
            if r.layer == "all" or int(r.layer) in layers:
                rows.append([r.layer, r.method, _f(r.level), _f(r.sparsity), _f(r.quality)])
        write_csv(a.out, ["layer", "method", "level", "sparsity", "quality"], rows)
        return
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for tr in collect_traces(model, data, layers, a.mode, threads=a.threads):
        save_trace(tr, out / f"layer{tr.layer}.mgst")
        prof = sparsity_stats(tr)
        rows.append([tr.layer, tr.samples, _f(prof.mean_sparsity), len(prof.dead_neurons)])
    write_csv(out / "sparsity.csv", ["layer", "samples", "mean_sparsity", "dead_neurons"], rows)


def cmd_sibs_build(a) -> None:
    trace = load_trace(a.trace)
    table = greedy_cover(mine_implications(trace), min(a.budget, trace.f), layer=trace.layer)
    save_table(table, _prep(a.out))
    log.info("layer %d budget %d: %d indicators cover %d neurons", trace.layer, a.budget,
             len(table.indicators), table.covered_count)


SIBS_HEADER = ["layer", "budget", "indicators", "covered", "amplification", "covered_fraction",
               "skip_rate", "violation_rate", "quality", "flops_reduction"]


def cmd_sibs_eval(a) -> None:
    model = load_checkpoint(a.checkpoint)
    data = _load_data(a.data, a.limit)
    paths = sorted(Path(a.tables).glob("*.mgsi"))
    if not paths:
        raise FileNotFoundError(f"no .mgsi tables in {a.tables}")
    results = []
    inputs = layer_inputs(model, data.x)
    for p in paths:
        table = load_table(p)
        results.append(evaluate_sibs(model, table, data, _table_budget(p, table), inputs))
    results.sort(key=lambda r: (r.layer, r.budget))
    write_csv(a.out, SIBS_HEADER, [
        [r.layer, r.budget, r.indicators, r.covered, _f(r.amplification), _f(r.covered_fraction),
         _f(r.skip_rate), _f(r.violation_rate), _f(r.quality), _f(r.flops_reduction)]
        for r in results])


def cmd_mgs_train(a) -> None:
    model = load_checkpoint(a.checkpoint)
    data = load_dataset(a.data)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = GateTrainConfig(epochs=a.epochs, learning_rate=a.lr, batch_size=a.batch_size, seed=a.seed,
                          gate_ratio=a.gate_ratio, threshold=a.threshold)
    rows = []
    inputs = layer_inputs(model, data.x)
    for layer in _parse_layers(a.layer, model.layer_count):
        gate, met = train_gate(model, layer, data, cfg, inputs)
        save_gate(gate, out / f"layer{layer}.mgsg")
        rows.append([layer, gate.g, gate.group_size, _f(met.loss_curve[-1]), _f(met.accuracy),
                     _f(met.positive_rate)])
    write_csv(out / "gate_train.csv",
              ["layer", "g", "group_size", "final_bce", "train_accuracy", "positive_rate"], rows)


MGS_HEADER = ["layer", "acc", "quality", "sparsity", "threshold"]


def cmd_mgs_eval(a) -> None:
    model = load_checkpoint(a.checkpoint)
    data = load_dataset(a.data)
    thresholds = _parse_thresholds(a.thresholds, model.layer_count) if a.thresholds else None
    gates = _load_gates(a.gates, model.layer_count, thresholds)
    rows = evaluate_gated(model, gates, data)
    write_csv(a.out, MGS_HEADER,
              [[r.layer, _f(r.accuracy), _f(r.quality), _f(r.sparsity), r.threshold] for r in rows])


def cmd_tune(a) -> None:
    model = load_checkpoint(a.checkpoint)
    data = load_dataset(a.data)
    gates = _load_gates(a.gates, model.layer_count)
    grid = [float(v) for v in a.grid.split(",")] if a.grid else THRESHOLD_GRID
    res = tune_thresholds(model, gates, data, a.budget, grid)
    if not res.within_budget:
        log.warning("quality budget %.6f unreachable; gating disabled on every layer", a.budget)
    if a.thresholds_out:
        _prep(a.thresholds_out).write_text(",".join(f"{t:g}" for t in res.thresholds) + "\n")
    rows = [[i, f"{t:g}"] for i, t in enumerate(res.thresholds)]
    rows.append(["all", "quality=" + _f(res.quality)])
    rows.append(["all", "vanilla=" + _f(res.vanilla_quality)])
    rows.append(["all", "sparsity=" + _f(res.sparsity)])
    write_csv(a.out, ["layer", "threshold"], rows)


FLOPS_HEADER = flops_mod.FLOPS_CSV_HEADER + ["quality"]


def flops_configs(model, gates, thresholds_by_label, tables_by_budget):
    configs = [flops_mod.MethodConfig("vanilla", "vanilla"),
               flops_mod.MethodConfig("mgs-disabled", "mgs-disabled")]
    for label, thr in thresholds_by_label.items():
        cfg_gates = {i: g.with_threshold(t) for i, (g, t) in enumerate(zip(gates, thr)) if g is not None}
        configs.append(flops_mod.MethodConfig(label, "mgs", gates=cfg_gates))
    for budget, tables in sorted(tables_by_budget.items()):
        configs.append(flops_mod.MethodConfig(f"sibs-b{budget}", "sibs", tables=tables))
    return configs


def cmd_flops(a) -> None:
    model = load_checkpoint(a.checkpoint)
    data = load_dataset(a.data)
    thresholds_by_label = {}
    gates = []
    if a.gates:
        gates = _load_gates(a.gates, model.layer_count)
        for spec in a.thresholds or ["0", "0.1", "0.25", "0.5"]:
            thresholds_by_label[f"mgs-{Path(spec).stem if Path(spec).is_file() else spec}"] = \
                _parse_thresholds(spec, model.layer_count)
    tables_by_budget = {}
    if a.tables:
        for p in sorted(Path(a.tables).glob("*.mgsi")):
            t = load_table(p)
            tables_by_budget.setdefault(_table_budget(p, t), {})[t.layer] = t
    rows = []
    for cfg in flops_configs(model, gates, thresholds_by_label, tables_by_budget):
        rep = flops_mod.measure(model, cfg, data)
        rows += [r + [_f(rep.quality)] for r in flops_mod.report_rows(rep)]
    write_csv(a.out, FLOPS_HEADER, rows)


def cmd_report(a) -> None:
    out = Path(a.out_dir)
    tables = []
    for p in sorted(out.glob("mgs_eval_*.csv")):
        label = p.stem[len("mgs_eval_"):]
        for r in read_csv(p):
            tables.append([label, r["layer"], f"{100 * float(r['acc']):.2f}", r["quality"],
                           f"{100 * float(r['sparsity']):.2f}", r["threshold"]])
    write_csv(out / "report_tables.csv",
              ["config", "layer", "acc_pct", "mse", "sparsity_pct", "threshold"], tables)

    table1 = []
    for p in sorted(out.glob("sibs_eval_*.csv")):
        split = p.stem[len("sibs_eval_"):]
        for r in read_csv(p):
            table1.append([split, r["layer"], r["budget"], r["covered"], r["amplification"],
                           f"{100 * float(r['covered_fraction']):.2f}",
                           f"{100 * float(r['skip_rate']):.2f}", r["violation_rate"], r["quality"]])
    write_csv(out / "report_table1.csv",
              ["split", "layer", "budget", "covered", "amplification", "covered_pct",
               "skip_rate_pct", "violation_rate", "mse"], table1)

    fig = []
    if (out / "flops.csv").exists():
        for r in read_csv(out / "flops.csv"):
            if r["layer"] == "total":
                fig.append([r["config"], r["measured_sparsity"], r["saved_fraction"],
                            f"{100 * float(r['saved_fraction']):.2f}", r["quality"]])
    write_csv(out / "report_flops.csv",
              ["config", "measured_sparsity", "saved_fraction", "flops_reduction_pct", "mse"], fig)


# -- pipeline -----------------------------------------------------------------

def run_pipeline(cfg: RunConfig) -> None:
    cfg.validate()
    budgets = cfg.budget_counts()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    ns = argparse.Namespace

    train, heldout = out / "train.mgsd", out / "heldout.mgsd"
    for path, seed, n in ((train, cfg.data_seed + 1, cfg.n_train),
                          (heldout, cfg.data_seed + 2, cfg.n_heldout)):
        cmd_gen_data(ns(d=cfg.d, f=cfg.f, layers=cfg.layers, bias_shift=cfg.bias_shift, components=8,
                        spec_seed=cfg.data_seed, n_samples=n, seed=seed, out=path))
    ckpt = out / "base.mgsb"
    cmd_train_base(ns(data=train, d=cfg.d, f=cfg.f, layers=cfg.layers, lr=cfg.lr, epochs=cfg.epochs,
                      batch_size=cfg.batch_size, seed=cfg.seed, bias_shift=cfg.bias_shift, out=ckpt,
                      loss_out=out / "loss_curve.csv", data_seed=cfg.data_seed, n_train=cfg.n_train))
    traces = out / "traces"
    cmd_profile(ns(checkpoint=ckpt, data=train, limit=cfg.n_profile, layers="all", mode="bitmap",
                   out=traces, mask=None, threads=cfg.threads))
    common = dict(checkpoint=ckpt, data=heldout)

    if cfg.method in ("profile", "all"):
        rows = []
        for method in ("random", "topk"):
            path = out / f"mask_{method}.csv"
            cmd_profile(ns(**common, limit=None, layers="all", mode="full", out=path, mask=method,
                           level=",".join(str(v) for v in cfg.mask_levels),
                           seeds=",".join(str(s) for s in cfg.mask_seeds), threads=cfg.threads))
            rows += read_csv(path)
        write_csv(out / "mask_study.csv", ["layer", "method", "level", "sparsity", "quality"],
                  [list(r.values()) for r in rows])

    tables_dir = out / "tables"
    if cfg.method in ("sibs", "all"):
        for layer in range(cfg.layers):
            for b in budgets:
                cmd_sibs_build(ns(trace=traces / f"layer{layer}.mgst", budget=b,
                                  out=tables_dir / f"layer{layer}_b{b}.mgsi"))
        cmd_sibs_eval(ns(checkpoint=ckpt, data=train, limit=cfg.n_profile, tables=tables_dir,
                         out=out / "sibs_eval_profile.csv"))
        cmd_sibs_eval(ns(**common, limit=None, tables=tables_dir, out=out / "sibs_eval_heldout.csv"))

    gates_dir = out / "gates"
    if cfg.method in ("mgs", "all"):
        cmd_mgs_train(ns(checkpoint=ckpt, data=train, layer="all", epochs=cfg.gate_epochs,
                         lr=cfg.gate_lr, batch_size=cfg.batch_size, seed=cfg.seed,
                         gate_ratio=cfg.gate_ratio, threshold=cfg.thresholds[0], out=gates_dir))
        fixed = ",".join(str(t) for t in cfg.thresholds)
        cmd_mgs_eval(ns(**common, gates=gates_dir, thresholds=fixed, out=out / "mgs_eval_fixed.csv"))
        tuned = out / "tuned_thresholds.txt"
        cmd_tune(ns(**common, gates=gates_dir, budget=cfg.quality_budget, grid=None,
                    thresholds_out=tuned, out=out / "tune.csv"))
        cmd_mgs_eval(ns(**common, gates=gates_dir, thresholds=str(tuned), out=out / "mgs_eval_tuned.csv"))

    if cfg.method != "profile":
        thresholds = []
        if cfg.method in ("mgs", "all"):
            thresholds = ["0", "0.1", "0.25", "0.5", str(out / "tuned_thresholds.txt")]
        cmd_flops(ns(**common, gates=gates_dir if thresholds else None, thresholds=thresholds,
                     tables=tables_dir if cfg.method in ("sibs", "all") else None,
                     out=out / "flops.csv"))
    cmd_report(ns(out_dir=out))


def cmd_run(a) -> None:
    run_pipeline(a.run_config)


# -- argument parsing ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="key = value run configuration file")
    shared.add_argument("--seed", type=int, default=0)
    shared.add_argument("--threads", type=int, default=1)
    shared.add_argument("--out-dir", dest="out_dir", default=None)
    shared.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sparsegate", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[shared], help=help_)
        sp.set_defaults(func=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "generate a synthetic dataset file")
    sp.add_argument("--d", type=int, default=64)
    sp.add_argument("--f", type=int, default=256, help="teacher hidden width")
    sp.add_argument("--layers", type=int, default=6, help="teacher depth")
    sp.add_argument("--bias-shift", type=float, default=1.6, help="teacher sparsity bias shift")
    sp.add_argument("--n-samples", type=int, default=8000)
    sp.add_argument("--spec-seed", type=int, default=0, help="seed of the mixture and teacher")
    sp.add_argument("--components", type=int, default=8)
    sp.add_argument("--out", required=True)

    sp = add("train-base", cmd_train_base, "train and save the frozen base model")
    sp.add_argument("--d", type=int, default=64)
    sp.add_argument("--f", type=int, default=256)
    sp.add_argument("--layers", type=int, default=6)
    sp.add_argument("--n-samples", dest="n_train", type=int, default=8000)
    sp.add_argument("--epochs", type=int, default=10)
    sp.add_argument("--lr", type=float, default=0.05)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--bias-shift", type=float, default=1.6)
    sp.add_argument("--data", help="dataset file; generated from --data-seed when omitted")
    sp.add_argument("--data-seed", type=int, default=0)
    sp.add_argument("--loss-out", help="CSV for the per-epoch loss curve")
    sp.add_argument("--out", required=True)

    sp = add("profile", cmd_profile, "collect activation traces or run the masking study")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--layers", default="all")
    sp.add_argument("--mode", choices=("full", "bitmap"), default="full")
    sp.add_argument("--limit", type=int, help="use only the first N samples")
    sp.add_argument("--mask", choices=("random", "topk"))
    sp.add_argument("--level", default="0.5,0.7,0.9", help="mask sparsity level(s)")
    sp.add_argument("--seeds", default="0,1,2", help="random-mask seeds to average over")
    sp.add_argument("--out", required=True, help="trace directory, or CSV path with --mask")

    sp = add("sibs-build", cmd_sibs_build, "mine implications and pick indicators")
    sp.add_argument("--trace", required=True)
    sp.add_argument("--budget", type=int, required=True)
    sp.add_argument("--out", required=True)

    sp = add("sibs-eval", cmd_sibs_eval, "evaluate indicator tables")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--tables", required=True)
    sp.add_argument("--limit", type=int)
    sp.add_argument("--out", default="-")

    sp = add("mgs-train", cmd_mgs_train, "train micro-gates against the frozen base")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--layer", default="all")
    sp.add_argument("--epochs", type=int, default=5)
    sp.add_argument("--lr", type=float, default=0.1)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--gate-ratio", type=float, default=0.125)
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--out", required=True, help="gate directory")

    sp = add("mgs-eval", cmd_mgs_eval, "per-layer gated evaluation table")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--gates", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--thresholds", help="one value, one per layer, or a file")
    sp.add_argument("--out", default="-")

    sp = add("tune", cmd_tune, "relax per-layer thresholds within a quality budget")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--gates", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--budget", type=float, required=True, help="allowed MSE increase over vanilla")
    sp.add_argument("--grid", help="comma-separated threshold grid")
    sp.add_argument("--thresholds-out")
    sp.add_argument("--out", default="-")

    sp = add("flops", cmd_flops, "instrumented MAC accounting per configuration")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--gates")
    sp.add_argument("--thresholds", nargs="*")
    sp.add_argument("--tables")
    sp.add_argument("--out", default="-")

    add("report", cmd_report, "merge CSVs of an output directory")
    add("run", cmd_run, "end-to-end pipeline from a config file")
    return p


_SHARED_KEYS = {"seed": "seed", "threads": "threads", "out_dir": "out_dir"}
# Subcommand flag dest -> run-config key supplying its default.
_CONFIG_KEYS = {
    "gen-data": {"d": "d", "f": "f", "layers": "layers", "bias_shift": "bias_shift",
                 "n_samples": "n_train"},
    "train-base": {"d": "d", "f": "f", "layers": "layers", "n_train": "n_train", "epochs": "epochs",
                   "lr": "lr", "batch_size": "batch_size", "bias_shift": "bias_shift",
                   "data_seed": "data_seed"},
    "mgs-train": {"epochs": "gate_epochs", "lr": "gate_lr", "batch_size": "batch_size",
                  "gate_ratio": "gate_ratio"},
    "tune": {"budget": "quality_budget"},
}


def _apply_config(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    """Config-file values become flag defaults; explicit flags win."""
    args = parser.parse_args(argv)
    cfg = load_config(args.config) if args.config else RunConfig()
    explicit = _explicit_flags(argv)
    if args.command == "run":
        overrides = {k: getattr(args, k) for k in _SHARED_KEYS if k in explicit}
        args.run_config = replace(cfg, **overrides)
        return args
    if args.config:
        keys = {**_SHARED_KEYS, **_CONFIG_KEYS.get(args.command, {})}
        for dest, key in keys.items():
            if dest not in explicit:
                setattr(args, dest, getattr(cfg, key))
    return args


def _explicit_flags(argv) -> set:
    names = set()
    for tok in argv:
        if tok.startswith("--"):
            names.add(tok[2:].split("=", 1)[0].replace("-", "_"))
    if "n_samples" in names:
        names.add("n_train")
    return names


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except SparsegateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_FILE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except SparsegateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_FILE
    return 0


if __name__ == "__main__":
    sys.exit(main())
