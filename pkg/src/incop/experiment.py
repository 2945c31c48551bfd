"""Multi-trial orchestration, CSV telemetry and run comparison."""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__, checkpoint
from .config import ExperimentConfig, dump_config
from .data import Dataset, load_idx_dir, normalize, resolve_data_dir, subset, synthetic_dataset
from .errors import ConfigError, InputError
from .flows import FlowDistanceConfig, compute_flow
from .imp import (LTH, SAP, FixedEpochs, FlowEpsilon, ImpConfig, ImpResult, Reference,
                  calibrate_epsilon, run_imp, train_reference)
from .nn import LayerSpec, SgdConfig, conv2d, dense, snapshot_weights
from .sparsity import PQConfig

CSV_SCHEMA_VERSION = 1
ITERATION_COLUMNS = [
    "trial", "seed", "iteration", "epochs_used", "test_accuracy", "train_loss",
    "remaining_weights_total", "remaining_weights_per_layer", "c_t_per_layer",
    "final_flow_distance",
]
EPOCH_COLUMNS = ["trial", "seed", "iteration", "epoch", "train_loss", "test_accuracy",
                 "flow_distance"]
SUMMARY_METRICS = ["epochs_used", "test_accuracy", "train_loss", "remaining_weights_total"]
SUMMARY_COLUMNS = ["iteration", "trials"] + [f"{m}_{s}" for m in SUMMARY_METRICS
                                             for s in ("mean", "std")]
COMPARE_COLUMNS = ["method", "pq_pair", "iteration", "metric", "mean", "std", "delta_mean"]
COMPARE_METRICS = {"accuracy": "test_accuracy", "epochs_used": "epochs_used",
                   "remaining_weights": "remaining_weights_total"}
TOTALS_COLUMNS = ["method", "pq_pair", "run", "total_epochs_mean", "total_epochs_std",
                  "final_accuracy_mean", "final_accuracy_std",
                  "final_remaining_weights_mean", "delta_total_epochs"]


def fmt(value) -> str:
    """CSV cell text: integers verbatim, reals with 17 significant digits."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    if isinstance(value, (list, tuple)):
        return ";".join(fmt(v) for v in value)
    return str(value)


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([fmt(row.get(c)) for c in columns])


def read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


# ------------------------------------------------------------ config -> objects

def load_dataset(cfg: ExperimentConfig) -> Dataset:
    ds_cfg = cfg.dataset
    if ds_cfg.name == "synthetic" and ds_cfg.path is None:
        s = ds_cfg.synthetic
        ds = synthetic_dataset(s.num_classes, s.dims, s.samples_per_class, s.seed, s.margin,
                               s.test_per_class)
    else:
        ds = load_idx_dir(resolve_data_dir(ds_cfg.name, ds_cfg.path), ds_cfg.name)
    if ds_cfg.subset_train is not None or ds_cfg.subset_test is not None:
        ds = subset(ds, ds_cfg.subset_train or ds.num_train, ds_cfg.subset_test or ds.num_test,
                    ds_cfg.subset_seed)
    return normalize(ds)


def build_specs(cfg: ExperimentConfig, dataset: Dataset) -> list[LayerSpec]:
    m = cfg.model
    features = int(np.prod(dataset.input_shape))
    if m.arch == "mlp":
        if m.widths[0] != features:
            raise ConfigError(f"{cfg.source}: model.widths starts at {m.widths[0]} "
                              f"but the dataset has {features} input features")
        widths = list(m.widths)
        specs = [dense(a, b) for a, b in zip(widths[:-2], widths[1:-1])]
        specs.append(dense(widths[-2], widths[-1], "identity"))
    else:
        if len(dataset.input_shape) != 3:
            raise ConfigError(f"{cfg.source}: model.arch cnn needs image-shaped inputs")
        channels, h, w = dataset.input_shape
        specs = []
        for out, k in m.conv:
            if k > h or k > w:
                raise ConfigError(f"{cfg.source}: conv kernel {k} exceeds the {h}x{w} feature map")
            specs.append(conv2d(channels, out, k))
            channels, h, w = out, h - k + 1, w - k + 1
        widths = [channels * h * w] + list(m.widths)
        specs += [dense(a, b) for a, b in zip(widths[:-2], widths[1:-1])]
        specs.append(dense(widths[-2], widths[-1], "identity"))
    if specs[-1].out_size != dataset.num_classes:
        raise ConfigError(f"{cfg.source}: the last layer has {specs[-1].out_size} outputs "
                          f"but the dataset has {dataset.num_classes} classes")
    return specs


def imp_config(cfg: ExperimentConfig, seed: int, epsilon: float | None = None) -> ImpConfig:
    pr, tr = cfg.prune, cfg.train
    if pr.method == "lth":
        method = LTH(pr.lth_rate)
    else:
        method = SAP(PQConfig(pr.p, pr.q, pr.gamma, pr.beta, pr.eta_mode, pr.eta))
    if pr.stopping == "flow" or epsilon is not None:
        eps = epsilon if epsilon is not None else pr.epsilon
        stopping = FlowEpsilon(pr.flow_kind, eps, tr.E, FlowDistanceConfig(pr.norm_mode))
    else:
        stopping = FixedEpochs(tr.E)
    return ImpConfig(T=pr.T, E=tr.E, finetune_epochs=tr.k, method=method, stopping=stopping,
                     sgd=SgdConfig(tr.lr, tr.momentum, tr.weight_decay, tr.batch_size),
                     seed=seed, trials=cfg.trials, probe_size=pr.probe_size,
                     rewind_to=pr.rewind_to, stall_prune_one=pr.stall_prune_one)


def trial_seeds(cfg: ExperimentConfig) -> list[int]:
    return [cfg.seed + i for i in range(cfg.trials)]


def reference_key(cfg: ExperimentConfig, seed: int, dataset: Dataset) -> tuple:
    """Everything the dense reference depends on; shared across prune settings."""
    return (seed, dataset.fingerprint(), cfg.model, cfg.train, cfg.prune.probe_size)


# ------------------------------------------------------------------ running

@dataclass
class TrialOutcome:
    trial: int
    seed: int
    result: ImpResult
    wall_ms: list[float]


def iteration_rows(trial: int, seed: int, result: ImpResult) -> list[dict]:
    return [{
        "trial": trial, "seed": seed, "iteration": r.iteration, "epochs_used": r.epochs_used,
        "test_accuracy": r.test_accuracy, "train_loss": r.train_loss,
        "remaining_weights_total": r.remaining_weights_total,
        "remaining_weights_per_layer": r.remaining_weights_per_layer,
        "c_t_per_layer": r.c_t_per_layer,
        "final_flow_distance": r.flow_distance_trace[-1] if r.flow_distance_trace else None,
    } for r in result.records]


def epoch_rows(trial: int, seed: int, result: ImpResult) -> list[dict]:
    return [{
        "trial": trial, "seed": seed, "iteration": e.iteration, "epoch": e.epoch,
        "train_loss": e.train_loss, "test_accuracy": e.test_accuracy, "flow_distance": e.distance,
    } for e in result.epochs]


def _checkpoint_writer(directory: Path, every: int, reference: Reference):
    directory.mkdir(parents=True, exist_ok=True)
    ref_flows = [("reference", snap) for snap in reference.flows.values()]
    checkpoint.save(directory / "reference.ckpt", reference.weights, ref_flows, reference.probe)

    def save(t, net):
        if t % every:
            return
        current = [("current", compute_flow(net, reference.probe, k)) for k in reference.flows]
        checkpoint.save(directory / f"iter_{t:03d}.ckpt", snapshot_weights(net),
                        ref_flows + current, reference.probe)
    return save


def run_trial(cfg: ExperimentConfig, trial: int, seed: int, out_dir: Path | None = None,
              checkpoint_every: int = 0, dataset: Dataset | None = None,
              reference: Reference | None = None, epsilon: float | None = None) -> TrialOutcome:
    dataset = dataset if dataset is not None else load_dataset(cfg)
    specs = build_specs(cfg, dataset)
    icfg = imp_config(cfg, seed, epsilon)
    if reference is None:
        reference = train_reference(icfg, specs, dataset)
    hook = None
    if checkpoint_every and out_dir is not None:
        hook = _checkpoint_writer(out_dir / f"trial_{trial}" / "checkpoints", checkpoint_every,
                                  reference)
    result = run_imp(icfg, specs, dataset, reference, checkpoint=hook)
    if out_dir is not None:
        tdir = out_dir / f"trial_{trial}"
        tdir.mkdir(parents=True, exist_ok=True)
        write_csv(tdir / "iterations.csv", ITERATION_COLUMNS, iteration_rows(trial, seed, result))
        write_csv(tdir / "epochs_trace.csv", EPOCH_COLUMNS, epoch_rows(trial, seed, result))
    return TrialOutcome(trial, seed, result, [r.wall_ms for r in result.records])


def _trial_worker(args):
    cfg, trial, seed, out_dir, every = args
    return run_trial(cfg, trial, seed, out_dir, every)


def summarize(per_trial: Sequence[Sequence[dict]]) -> list[dict]:
    """Mean and population std per iteration over trials (std is 0 for one trial)."""
    iterations = sorted({int(r["iteration"]) for rows in per_trial for r in rows})
    out = []
    for t in iterations:
        row = {"iteration": t}
        picked = [next(r for r in rows if int(r["iteration"]) == t) for rows in per_trial]
        row["trials"] = len(picked)
        for m in SUMMARY_METRICS:
            vals = np.array([float(r[m]) for r in picked])
            row[f"{m}_mean"] = float(vals.mean())
            row[f"{m}_std"] = float(vals.std())
        out.append(row)
    return out


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def run_experiment(cfg: ExperimentConfig, out_dir, jobs: int = 1, checkpoint_every: int = 0,
                   dataset: Dataset | None = None, references: dict | None = None,
                   epsilon: float | None = None) -> list[TrialOutcome]:
    """Run every trial, then write summary.csv and manifest.json."""
    if epsilon is not None:
        cfg = replace(cfg, prune=replace(cfg.prune, stopping="flow", epsilon=float(epsilon)))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = _now()
    t0 = time.perf_counter()
    dataset = dataset if dataset is not None else load_dataset(cfg)
    build_specs(cfg, dataset)  # fail fast on shape errors
    seeds = trial_seeds(cfg)
    if jobs > 1 and references is None:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_trial_worker, [(cfg, i, s, out_dir, checkpoint_every)
                                                     for i, s in enumerate(seeds)]))
    else:
        outcomes = []
        for i, s in enumerate(seeds):
            ref = None
            if references is not None:
                key = reference_key(cfg, s, dataset)
                if key not in references:
                    references[key] = train_reference(imp_config(cfg, s), build_specs(cfg, dataset),
                                                      dataset)
                ref = references[key]
            outcomes.append(run_trial(cfg, i, s, out_dir, checkpoint_every, dataset, ref))

    per_trial = [iteration_rows(o.trial, o.seed, o.result) for o in outcomes]
    write_csv(out_dir / "summary.csv", SUMMARY_COLUMNS, summarize(per_trial))
    (out_dir / "config.yaml").write_text(dump_config(cfg), encoding="utf-8")
    manifest = {
        "tool": "incop",
        "version": __version__,
        "csv_schema_version": CSV_SCHEMA_VERSION,
        "config_hash": cfg.config_hash(),
        "config_source": cfg.source,
        "method": cfg.method_label,
        "pq_pair": cfg.pq_pair,
        "T": cfg.prune.T,
        "E": cfg.train.E,
        "epsilon": cfg.prune.epsilon if cfg.prune.stopping == "flow" else None,
        "dataset": {"name": cfg.dataset.name, "fingerprint": dataset.fingerprint()},
        "seeds": seeds,
        "trials": [{
            "trial": o.trial,
            "seed": o.seed,
            "reference_accuracy": o.result.reference.accuracy,
            "reference_epochs": o.result.reference.epochs,
            "wall_ms_per_iteration": o.wall_ms,
            "files": {"iterations": f"trial_{o.trial}/iterations.csv",
                      "epochs_trace": f"trial_{o.trial}/epochs_trace.csv"},
        } for o in outcomes],
        "files": {"summary": "summary.csv", "config": "config.yaml"},
        "started": started,
        "finished": _now(),
        "wall_ms": (time.perf_counter() - t0) * 1e3,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return outcomes


def calibrate(cfg: ExperimentConfig, kinds=("IF", "GF"), dataset: Dataset | None = None,
              reference: Reference | None = None):
    dataset = dataset if dataset is not None else load_dataset(cfg)
    specs = build_specs(cfg, dataset)
    icfg = imp_config(cfg, cfg.seed)
    if isinstance(icfg.stopping, FixedEpochs):
        # the distance norm still comes from the prune section
        icfg = replace(icfg, stopping=FlowEpsilon("GF", 1.0, cfg.train.E,
                                                  FlowDistanceConfig(cfg.prune.norm_mode)))
    return calibrate_epsilon(icfg, specs, dataset, kinds, reference)


# ----------------------------------------------------------------- comparing

@dataclass
class RunData:
    path: Path
    manifest: dict
    trials: list[list[dict]]

    @property
    def total_epochs(self) -> list[int]:
        return [sum(int(r["epochs_used"]) for r in rows) for rows in self.trials]


def load_run(path) -> RunData:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise InputError(f"{path}: not a completed run ({exc})") from None
    trials = [read_csv(path / t["files"]["iterations"]) for t in manifest["trials"]]
    return RunData(path, manifest, trials)


def compare_runs(run_dirs: Sequence, out_path) -> tuple[Path, Path]:
    """Long-format per-iteration metrics plus a totals table for each run."""
    if len(run_dirs) < 2:
        raise InputError("compare needs at least two run directories")
    runs = [load_run(p) for p in run_dirs]
    first = runs[0]
    for run in runs[1:]:
        if run.manifest["T"] != first.manifest["T"]:
            raise InputError(f"{run.path}: T={run.manifest['T']} differs from "
                             f"{first.path}: T={first.manifest['T']}")
        if run.manifest["dataset"]["fingerprint"] != first.manifest["dataset"]["fingerprint"]:
            raise InputError(f"{run.path}: dataset hash differs from {first.path}")

    def stats(run):
        return {row["iteration"]: row for row in summarize(run.trials)}

    base = stats(first)
    long_rows = []
    for run in runs:
        summary = stats(run)
        for t, row in summary.items():
            for metric, column in COMPARE_METRICS.items():
                mean = row[f"{column}_mean"]
                long_rows.append({
                    "method": run.manifest["method"], "pq_pair": run.manifest["pq_pair"],
                    "iteration": t, "metric": metric, "mean": mean,
                    "std": row[f"{column}_std"],
                    "delta_mean": mean - base[t][f"{column}_mean"],
                })
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_csv(out_path, COMPARE_COLUMNS, long_rows)

    base_total = float(np.mean(first.total_epochs))
    totals = []
    for run in runs:
        epochs = np.array(run.total_epochs, dtype=float)
        final = [rows[-1] for rows in run.trials]
        acc = np.array([float(r["test_accuracy"]) for r in final])
        totals.append({
            "method": run.manifest["method"], "pq_pair": run.manifest["pq_pair"],
            "run": run.path.name,
            "total_epochs_mean": float(epochs.mean()), "total_epochs_std": float(epochs.std()),
            "final_accuracy_mean": float(acc.mean()), "final_accuracy_std": float(acc.std()),
            "final_remaining_weights_mean": float(np.mean([float(r["remaining_weights_total"])
                                                           for r in final])),
            "delta_total_epochs": float(epochs.mean()) - base_total,
        })
    totals_path = out_path.with_name(out_path.stem + "_totals.csv")
    write_csv(totals_path, TOTALS_COLUMNS, totals)
    return out_path, totals_path

