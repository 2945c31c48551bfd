"""Command-line entry point: ``incop run|compare|inspect-flows|calibrate-epsilon|gen-data``.

Exit codes: 0 success, 2 invalid configuration or input, 3 run aborted
because a layer was pruned away entirely.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, checkpoint, experiment
from .config import ExperimentConfig, SyntheticParams, load_config
from .data import synthetic_dataset, write_dataset_idx
from .errors import DeadLayerError, FormatError, IncopError
from .flows import FlowDistanceConfig, compute_flow, flow_distance

EXIT_OK, EXIT_INVALID, EXIT_ABORTED = 0, 2, 3
INSPECT_COLUMNS = ["role", "kind", "layer", "shape", "reference_norm", "current_norm",
                   "distance_to_reference"]


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed_override", None) is not None:
        cfg = replace(cfg, seed=args.seed_override)
    return cfg


def cmd_run(args) -> int:
    cfg = _load(args)
    outcomes = experiment.run_experiment(cfg, args.out, jobs=args.jobs,
                                         checkpoint_every=args.checkpoint_every)
    for o in outcomes:
        total = sum(r.epochs_used for r in o.result.records)
        final = o.result.records[-1]
        print(f"trial {o.trial} seed {o.seed}: {total} epochs, final accuracy "
              f"{final.test_accuracy:.4f}, {final.remaining_weights_total} weights left")
    print(f"wrote {Path(args.out) / 'summary.csv'}")
    return EXIT_OK


def cmd_compare(args) -> int:
    long_path, totals_path = experiment.compare_runs(args.runs, args.out)
    for row in experiment.read_csv(totals_path):
        print(f"{row['method']:>12} {row['pq_pair']:>8}  total epochs {row['total_epochs_mean']}"
              f"  final accuracy {row['final_accuracy_mean']}")
    print(f"wrote {long_path} and {totals_path}")
    return EXIT_OK


def inspect_rows(path) -> list[dict]:
    ck = checkpoint.load(path)
    refs = [(r, s) for r, s in ck.flows if r == "reference"]
    if not refs:
        raise FormatError(f"{path}: checkpoint has no flow snapshot section")
    net = ck.network()
    rows = []
    for _, ref in refs:
        if ck.probe is not None:
            current = compute_flow(net, ck.probe, ref.kind)
        else:
            current = ck.flow("current", ref.kind) or ref
        dist = flow_distance(current, ref, FlowDistanceConfig())
        for i, (a, b) in enumerate(zip(ref.layers, current.layers)):
            rows.append({"role": "reference", "kind": ref.kind, "layer": i,
                         "shape": "x".join(map(str, a.shape)),
                         "reference_norm": float(np.linalg.norm(a)),
                         "current_norm": float(np.linalg.norm(b)),
                         "distance_to_reference": dist})
    return rows


def cmd_inspect_flows(args) -> int:
    rows = inspect_rows(args.checkpoint)
    out = open(args.out, "w", encoding="utf-8", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(INSPECT_COLUMNS)
        for row in rows:
            writer.writerow([experiment.fmt(row[c]) for c in INSPECT_COLUMNS])
    finally:
        if args.out:
            out.close()
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = _load(args)
    kinds = tuple(args.kinds.split(","))
    cal = experiment.calibrate(cfg, kinds)
    rows = []
    for kind, c in cal.items():
        for step, d in enumerate(c.trace):
            rows.append({"kind": kind, "row": "trace", "step": step, "value": d})
        for frac, eps in sorted(c.suggestions.items()):
            rows.append({"kind": kind, "row": "suggestion", "step": frac, "value": eps})
            print(f"{kind}: {frac:.0%} of initial distance {c.initial_distance:.6g} -> epsilon {eps:.6g}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        experiment.write_csv(out / "calibration.csv", ["kind", "row", "step", "value"], rows)
    return EXIT_OK


def cmd_gen_data(args) -> int:
    if args.config:
        params = _load(args).dataset.synthetic
    else:
        params = SyntheticParams()
    overrides = {k: v for k, v in (("num_classes", args.classes), ("dims", args.dims),
                                   ("samples_per_class", args.samples_per_class),
                                   ("test_per_class", args.test_per_class),
                                   ("margin", args.margin), ("seed", args.seed_override))
                 if v is not None}
    params = replace(params, **overrides)
    ds = synthetic_dataset(params.num_classes, params.dims, params.samples_per_class,
                           params.seed, params.margin, params.test_per_class)
    write_dataset_idx(ds, args.out)
    print(f"wrote {ds.num_train} train and {ds.num_test} test samples to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="incop", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"incop {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run every trial of a config and write CSV telemetry")
    run.add_argument("--config", required=True)
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--jobs", type=int, default=1, help="parallel trial workers")
    run.add_argument("--checkpoint-every", type=int, default=0, metavar="N",
                     help="save a checkpoint every N pruning iterations (0 disables)")
    run.add_argument("--seed-override", type=int)
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="merge completed runs into plot-ready CSV")
    cmp_.add_argument("runs", nargs="+", help="run directories")
    cmp_.add_argument("--out", required=True, help="long-format CSV path")
    cmp_.set_defaults(func=cmd_compare)

    ins = sub.add_parser("inspect-flows", help="dump flow snapshot norms from a checkpoint")
    ins.add_argument("checkpoint")
    ins.add_argument("--out", help="write CSV here instead of stdout")
    ins.set_defaults(func=cmd_inspect_flows)

    cal = sub.add_parser("calibrate-epsilon", help="suggest epsilon from the first iteration")
    cal.add_argument("--config", required=True)
    cal.add_argument("--out", help="directory for calibration.csv")
    cal.add_argument("--kinds", default="IF,GF")
    cal.add_argument("--seed-override", type=int)
    cal.set_defaults(func=cmd_calibrate)

    gen = sub.add_parser("gen-data", help="write a synthetic dataset as IDX files")
    gen.add_argument("--config")
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--classes", type=int)
    gen.add_argument("--dims", type=int)
    gen.add_argument("--samples-per-class", type=int)
    gen.add_argument("--test-per-class", type=int)
    gen.add_argument("--margin", type=float)
    gen.add_argument("--seed-override", type=int)
    gen.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    if getattr(args, "checkpoint_every", 0) < 0:
        parser.error("--checkpoint-every must be >= 0")
    if args.command == "calibrate-epsilon" and not set(args.kinds.split(",")) <= {"IF", "GF"}:
        parser.error("--kinds takes IF, GF or IF,GF")
    try:
        return args.func(args)
    except DeadLayerError as exc:
        print(f"incop: run aborted: {exc}", file=sys.stderr)
        return EXIT_ABORTED
    except (IncopError, ValueError) as exc:
        print(f"incop: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
