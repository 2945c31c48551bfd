"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The summary lines are printed in a dedicated "acceptance criteria" section
at the end of the pytest run. Criteria 6 to 8 share one module-scoped run of
the scaled efficiency experiment (and an independent repeat for 8).
"""

import math
import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import spearmanr

from incop import nn
from incop.config import parse_config
from incop.data import load_idx_dir, synthetic_dataset, write_dataset_idx
from incop.experiment import (calibrate, load_dataset, read_csv, reference_key,
                              run_experiment)
from incop.flows import ProbeSet, connectivity
from incop.imp import (LTH, SAP, FixedEpochs, FlowEpsilon, ImpConfig, calibrate_epsilon,
                       run_imp, train_reference)
from incop.sparsity import PQConfig, prune_count, pq_index

from conftest import numeric_grads, random_small_net, record_acceptance

PAIRS = [(1.0, 2.0), (0.5, 1.0)]


def report(number, checks, detail):
    passed = all(checks.values())
    failed = [k for k, ok in checks.items() if not ok]
    record_acceptance(number, passed, detail + (f"  failed: {', '.join(failed)}" if failed else ""))
    assert passed, failed


# ------------------------------------------------------------------ 1

def test_criterion_1_pq_index_exactness():
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(1000):
        v = rng.standard_normal(int(rng.integers(1, 200)))
        alpha = float(rng.choice([-1, 1]) * 10 ** rng.uniform(-6, 6))
        for p, q in PAIRS:
            worst = max(worst, abs(pq_index(alpha * v, p, q) - pq_index(v, p, q)))
    one_hot = all(
        pq_index(np.eye(d)[d - 1] * 3.7, p, q) == 1 - d ** (1 / q - 1 / p)
        for d in (2, 4, 16, 256) for p, q in PAIRS)
    uniform = max(abs(pq_index(np.full(d, -2.5), p, q))
                  for d in (1, 2, 7, 64, 1000) for p, q in PAIRS)
    elapsed = time.perf_counter() - start
    report(1, {"scale": worst <= 1e-12, "one_hot": one_hot, "uniform": uniform <= 1e-12,
               "runtime": elapsed < 1.0},
           f"max scale drift {worst:.1e}, uniform {uniform:.1e}, {elapsed:.2f}s")


# ------------------------------------------------------------------ 2

def brute_prune_count(v, p, q, gamma, beta, exact):
    """Independent literal evaluation of the PQ-Index bound and prune count."""
    d = len(v)
    mags = [abs(x) for x in v]
    norm_p = sum(m ** p for m in mags) ** (1 / p)
    norm_q = sum(m ** q for m in mags) ** (1 / q)
    index = 1 - d ** (1 / q - 1 / p) * norm_p / norm_q

    def bound(eta):
        return d * (1 + eta) ** (-q / (q - p)) * (1 - index) ** (q * p / (q - p))

    if exact:
        order = sorted(range(d), key=lambda i: (-mags[i], i))
        r = d
        for cand in range(1, d + 1):
            head = sum(mags[i] ** p for i in order[:cand])
            tail = sum(mags[i] ** p for i in order[cand:])
            if cand >= bound(tail / head):
                r = cand
                break
    else:
        r = bound(0.0)
    r = min(max(r, 0.0), d)
    return math.floor(d * min(gamma * (1 - r / d), beta))


def test_criterion_2_sap_arithmetic_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    mismatches, checked = [], 0
    for layer in range(100):
        d = int(rng.integers(1, 65))
        kind = layer % 4
        if kind == 0:
            v = rng.standard_normal(d)
        elif kind == 1:
            v = rng.standard_normal(d) * (rng.random(d) < 0.3)
        elif kind == 2:
            v = rng.laplace(size=d) ** 3
        else:
            v = rng.integers(-3, 4, d).astype(float)
        if not np.any(v):
            v[0] = 1.0
        p, q = PAIRS[layer % 2]
        gamma = float(rng.uniform(0.5, 3.0))
        beta = float(rng.uniform(0.1, 1.0))
        for exact in (False, True):
            cfg = PQConfig(p, q, gamma, beta, "exact" if exact else "fixed", 0.0)
            got = prune_count(v, cfg)
            want = brute_prune_count(v.tolist(), p, q, gamma, beta, exact)
            checked += 1
            if got != want:
                mismatches.append((layer, exact, got, want))
    elapsed = time.perf_counter() - start
    report(2, {"exact_equality": not mismatches, "runtime": elapsed < 10},
           f"{checked} prune counts compared, {len(mismatches)} mismatches, {elapsed:.2f}s")


# ------------------------------------------------------------------ 3

def test_criterion_3_gradient_fidelity():
    from conftest import relative_error

    start = time.perf_counter()
    worst, masked_ok, kinds = 0.0, True, set()
    for seed in range(20):
        net, x, y = random_small_net(seed)
        assert sum(w.size for w in net.weights) <= 200
        kinds.update(spec.kind for spec in net.layers)
        rng = np.random.default_rng(seed)
        for w, m in zip(net.weights, net.masks):
            m[...] = rng.random(m.shape) > 0.25
            w *= m
        grads = nn.backward(net, x, y)
        numeric = numeric_grads(net, x, y)
        for g, n, m in zip(grads, numeric, net.masks):
            masked_ok &= bool(np.all(g[m == 0] == 0))
            live = m != 0
            if live.any():
                worst = max(worst, float(relative_error(g[live], n[live]).max()))
    elapsed = time.perf_counter() - start
    report(3, {"relative_error": worst <= 1e-6, "masked_zero": masked_ok,
               "dense_and_conv": kinds == {"dense", "conv2d"}, "runtime": elapsed < 30},
           f"max relative error {worst:.1e} over 20 nets, {elapsed:.2f}s")


# ------------------------------------------------------------------ 4

def naive_connectivity(net, inputs):
    sums = None
    for x in inputs:
        _, _, outs = nn._forward(net, nn._as_batch(net, x[None]))
        acts = [o.mean(axis=(2, 3))[0] if o.ndim == 4 else o[0] for o in outs]
        terms = []
        for a, b in zip(acts[:-1], acts[1:]):
            terms.append(np.array([[ai * bj for bj in b] for ai in a]))
        sums = terms if sums is None else [s + t for s, t in zip(sums, terms)]
    return [s / len(inputs) for s in sums]


def test_criterion_4_connectivity_oracle():
    start = time.perf_counter()
    worst = 0.0
    for case in range(50):
        net, x, y = random_small_net(100 + case)
        n = int(np.random.default_rng(case).integers(1, 9))
        inputs = np.resize(x, (n, x.shape[1]))
        got = connectivity(net, ProbeSet(inputs, np.resize(y, n), case))
        for a, b in zip(got.layers, naive_connectivity(net, inputs)):
            worst = max(worst, float(np.abs(a - b).max()))
    elapsed = time.perf_counter() - start
    report(4, {"max_abs_diff": worst <= 1e-12, "runtime": elapsed < 5},
           f"max |diff| {worst:.1e} over 50 cases, {elapsed:.2f}s")


# ------------------------------------------------------------------ 5

def test_criterion_5_structural_suite():
    start = time.perf_counter()
    ds = synthetic_dataset(4, 16, 60, seed=3, margin=2.5, test_per_class=20)
    from incop.data import normalize
    ds = normalize(ds)
    specs = nn.mlp([16, 20, 12, 4])
    sgd = nn.SgdConfig(0.05, 0.9, 0.0, 16)
    base = ImpConfig(T=5, E=4, finetune_epochs=1, method=LTH(0.2), stopping=FixedEpochs(4),
                     sgd=sgd, seed=5, probe_size=64)
    ref = train_reference(base, specs, ds)
    checks = {}

    masks_seen = []

    def capture(t, net):
        masks_seen.append([m.copy() for m in net.masks])
        checks.setdefault("mask_weight_consistent", True)
        checks["mask_weight_consistent"] &= all(np.array_equal(w, m * w)
                                                 for w, m in zip(net.weights, net.masks))

    lth = run_imp(base, specs, ds, ref, checkpoint=capture)
    expected = [w.size for w in ref.weights.weights]
    lth_ok = True
    for rec in lth.records:
        expected = [d - math.floor(0.2 * d) if math.floor(0.2 * d) or d <= 1 else d - 1
                    for d in expected]
        lth_ok &= rec.remaining_weights_per_layer == expected
    checks["lth_recurrence"] = lth_ok

    beta = 0.5
    sap_cfg = replace(base, method=SAP(PQConfig(0.5, 1.0, 3.0, beta)))
    cal = calibrate_epsilon(replace(sap_cfg, stopping=FlowEpsilon("GF", 1.0, 4)), specs, ds,
                            ("GF",), ref)
    eps = cal["GF"].suggestions[0.25]
    sap = run_imp(replace(sap_cfg, stopping=FlowEpsilon("GF", eps, 4)), specs, ds, ref,
                  checkpoint=capture)
    loose = run_imp(replace(sap_cfg, stopping=FlowEpsilon("GF", 1e9, 4)), specs, ds, ref)

    sound, early = True, 0
    for rec in sap.records + loose.records:
        trace = rec.flow_distance_trace
        eps_used = eps if rec in sap.records else 1e9
        if rec.epochs_used < 4:
            early += 1
            sound &= trace[-1] <= eps_used
        sound &= all(d > eps_used for d in trace[:-1])
        sound &= len(trace) == rec.epochs_used
    checks["stopping_soundness"] = sound and early > 0

    cap_ok = True
    prev = [w.size for w in ref.weights.weights]
    for rec in sap.records:
        cap_ok &= all(c <= math.floor(beta * d) for c, d in zip(rec.c_t_per_layer, prev))
        prev = rec.remaining_weights_per_layer
    checks["beta_cap"] = cap_ok

    monotone = True
    for run in (lth, sap):
        curve = [[w.size for w in ref.weights.weights]] + [r.remaining_weights_per_layer
                                                            for r in run.records]
        monotone &= all(all(b <= a for a, b in zip(x, y)) for x, y in zip(curve, curve[1:]))
    checks["monotone"] = monotone

    no_revive = True
    for seq in (masks_seen[:5], masks_seen[5:]):
        for before, after in zip(seq, seq[1:]):
            no_revive &= all(np.all(a <= b) for a, b in zip(after, before))
    checks["no_revive"] = no_revive
    elapsed = time.perf_counter() - start
    checks["runtime"] = elapsed < 60
    report(5, checks, f"T=5 LTH and SAP runs, {early} early stops, {elapsed:.1f}s")


# ------------------------------------------------------- 6, 7, 8 (shared run)

SCALED_CONFIG = """\
dataset:
  name: {name}
{dataset}model:
  arch: mlp
  widths: [784, 128, 64, 10]
train: {{lr: 0.01, momentum: 0.9, weight_decay: 0.0, batch_size: 64, E: 20, k: 5}}
prune:
  method: sap
  T: 10
  p: 0.5
  q: 1.0
  gamma: 1.0
  beta: 0.9
  eta_mode: fixed
  eta: 0.0
  probe_size: 1024
  norm_mode: per_layer_relative
seed: 0
trials: 3
"""


def scaled_config():
    root = os.environ.get("INCOP_DATA_DIR")
    if root and (Path(root) / "mnist").is_dir():
        return parse_config(SCALED_CONFIG.format(
            name="mnist", dataset="  subset: {train: 10000, test: 2000, seed: 0}\n"), "scaled")
    synthetic = ("  synthetic: {num_classes: 10, dims: 784, samples_per_class: 1000, "
                 "test_per_class: 200, margin: 3.0, seed: 0}\n")
    return parse_config(SCALED_CONFIG.format(name="synthetic", dataset=synthetic), "scaled")


def run_scaled_suite(root: Path):
    start = time.perf_counter()
    cfg = scaled_config()
    ds = load_dataset(cfg)
    refs: dict = {}
    sap = run_experiment(cfg, root / "sap", dataset=ds, references=refs)
    ref0 = refs[reference_key(cfg, cfg.seed, ds)]
    cal = calibrate(cfg, ("IF", "GF"), ds, reference=ref0)
    eps = {k: cal[k].suggestions[0.10] for k in ("IF", "GF")}
    flow = {}
    for kind in ("GF", "IF"):
        kcfg = replace(cfg, prune=replace(cfg.prune, stopping="flow", flow_kind=kind,
                                          epsilon=eps[kind]))
        flow[kind] = run_experiment(kcfg, root / kind.lower(), dataset=ds, references=refs)
    return {"cfg": cfg, "dataset": ds, "sap": sap, "flow": flow, "eps": eps, "root": root,
            "seconds": time.perf_counter() - start}


@pytest.fixture(scope="module")
def scaled(tmp_path_factory):
    return run_scaled_suite(tmp_path_factory.mktemp("scaled"))


def totals(outcomes):
    return [sum(r.epochs_used for r in o.result.records) for o in outcomes]


@pytest.mark.slow
def test_criterion_6_efficiency(scaled):
    sap, gf, if_ = scaled["sap"], scaled["flow"]["GF"], scaled["flow"]["IF"]
    sap_tot, gf_tot, if_tot = totals(sap), totals(gf), totals(if_)
    checks = {
        "a_sap_total_200": all(t == 200 for t in sap_tot),
        "a_gf_not_above_sap": all(g <= s for g, s in zip(gf_tot, sap_tot)),
        "a_gf_strict_in_2_of_3": sum(g < s for g, s in zip(gf_tot, sap_tot)) >= 2,
    }
    final = {name: float(np.mean([o.result.records[-1].test_accuracy for o in runs]))
             for name, runs in (("SAP", sap), ("GF", gf), ("IF", if_))}
    checks["b_gf_accuracy_within_3pp"] = abs(final["GF"] - final["SAP"]) <= 0.03
    checks["b_if_accuracy_within_3pp"] = abs(final["IF"] - final["SAP"]) <= 0.03
    curves_ok, worst = True, 0.0
    for runs in (sap, gf, if_):
        for o in runs:
            curve = [r.remaining_weights_total for r in o.result.records]
            curves_ok &= all(b <= a for a, b in zip(curve, curve[1:]))
    for s, g, i in zip(sap, gf, if_):
        for rs, rg, ri in zip(s.result.records, g.result.records, i.result.records):
            for other in (rg, ri):
                rel = abs(other.remaining_weights_total - rs.remaining_weights_total) / rs.remaining_weights_total
                worst = max(worst, rel)
    checks["c_nonincreasing"] = curves_ok
    checks["c_within_5pct"] = worst <= 0.05
    checks["runtime"] = scaled["seconds"] <= 15 * 60
    detail = (f"data={scaled['cfg'].dataset.name} eps GF={scaled['eps']['GF']:.4g} "
              f"IF={scaled['eps']['IF']:.4g}; total epochs SAP {sap_tot} GF {gf_tot} IF {if_tot}; "
              f"final acc SAP {final['SAP']:.4f} GF {final['GF']:.4f} IF {final['IF']:.4f}; "
              f"max weights gap {worst:.2%}; {scaled['seconds']:.0f}s")
    report(6, checks, detail)


@pytest.mark.slow
def test_criterion_7_flow_tracks_accuracy(scaled):
    checks, parts = {}, []
    for kind in ("GF", "IF"):
        dist, gap = [], []
        for o in scaled["flow"][kind]:
            acc_star = o.result.reference.accuracy
            for e in o.result.epochs:
                dist.append(e.distance)
                gap.append(abs(e.test_accuracy - acc_star))
        rho = float(spearmanr(dist, gap).statistic)
        checks[f"{kind}_rho"] = rho >= 0.5
        parts.append(f"{kind} rho={rho:.3f} over {len(dist)} epochs")
    report(7, checks, "; ".join(parts))


@pytest.mark.slow
def test_criterion_8_determinism(scaled, tmp_path_factory):
    repeat = run_scaled_suite(tmp_path_factory.mktemp("repeat"))
    checks = {}
    for method in ("sap", "gf", "if"):
        for trial in range(3):
            rel = Path(method) / f"trial_{trial}" / "iterations.csv"
            a = (scaled["root"] / rel).read_bytes()
            b = (repeat["root"] / rel).read_bytes()
            checks[str(rel)] = a == b
    report(8, checks, f"{len(checks)} iterations.csv files compared byte for byte")


# ------------------------------------------------------------------ 9

GOLDEN_HEADERS = {
    "iterations.csv": "trial,seed,iteration,epochs_used,test_accuracy,train_loss,"
                      "remaining_weights_total,remaining_weights_per_layer,c_t_per_layer,"
                      "final_flow_distance",
    "epochs_trace.csv": "trial,seed,iteration,epoch,train_loss,test_accuracy,flow_distance",
    "summary.csv": "iteration,trials,epochs_used_mean,epochs_used_std,test_accuracy_mean,"
                   "test_accuracy_std,train_loss_mean,train_loss_std,"
                   "remaining_weights_total_mean,remaining_weights_total_std",
}


def test_criterion_9_idx_and_csv_interface(tmp_path):
    checks = {}
    ds = synthetic_dataset(3, 49, 20, seed=4, margin=2.0)
    write_dataset_idx(ds, tmp_path / "idx")
    back = load_idx_dir(tmp_path / "idx")
    checks["idx_round_trip"] = all(
        getattr(back, f).tobytes() == getattr(ds, f).tobytes()
        for f in ("train_inputs", "train_labels", "test_inputs", "test_labels"))

    cfg = parse_config(
        "dataset:\n  synthetic: {num_classes: 3, dims: 49, samples_per_class: 20, test_per_class: 5}\n"
        "model: {widths: [49, 6, 3]}\ntrain: {E: 2, k: 1, batch_size: 16, lr: 0.05}\n"
        "prune: {T: 2, stopping: flow, epsilon: 0.5, probe_size: 16}\ntrials: 2\n", "golden")
    run_experiment(cfg, tmp_path / "run")
    for name, header in GOLDEN_HEADERS.items():
        path = tmp_path / "run" / (name if name == "summary.csv" else f"trial_1/{name}")
        text = path.read_bytes().decode("utf-8")
        checks[f"{name}_header"] = text.split("\n", 1)[0] == header
        rows = read_csv(path)
        checks[f"{name}_rows"] = len(rows) > 0 and all(len(r) == len(header.split(",")) for r in rows)
    report(9, checks, "IDX round trip and pinned CSV headers")
