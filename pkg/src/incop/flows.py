"""Information-flow (connectivity) and gradient-flow snapshots of a network."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import InputError
from .nn import Network, _as_batch, _forward, backward

KINDS = ("IF", "GF")
NORM_MODES = ("global_l2", "per_layer_relative")


@dataclass(frozen=True)
class ProbeSet:
    inputs: np.ndarray
    labels: np.ndarray
    seed: int

    def __post_init__(self):
        if len(self.labels) == 0 or len(self.inputs) != len(self.labels):
            raise InputError("probe set must be nonempty with one label per input")
        for name in ("inputs", "labels"):
            arr = np.array(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @cached_property
    def probe_id(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.inputs, dtype=np.float64).tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype=np.int64).tobytes())
        return f"{self.seed}:{h.hexdigest()[:16]}"


def draw_probe(inputs, labels, size: int, seed: int) -> ProbeSet:
    """Seeded sample (without replacement) of ``size`` rows from a training split."""
    n = len(labels)
    if size < 1:
        raise InputError("probe size must be positive")
    idx = np.sort(np.random.default_rng(seed).permutation(n)[:min(size, n)])
    return ProbeSet(inputs[idx], labels[idx], seed)


@dataclass(frozen=True)
class FlowSnapshot:
    kind: str
    layers: tuple[np.ndarray, ...]
    probe_id: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"unknown flow kind {self.kind!r}")
        object.__setattr__(self, "layers", tuple(self.layers))
        for arr in self.layers:
            arr.setflags(write=False)

    def norms(self) -> list[float]:
        return [float(np.linalg.norm(a)) for a in self.layers]


@dataclass(frozen=True)
class FlowDistanceConfig:
    norm_mode: str = "per_layer_relative"
    epsilon_floor: float = 1e-12

    def __post_init__(self):
        if self.norm_mode not in NORM_MODES:
            raise InputError(f"unknown norm mode {self.norm_mode!r}")
        if not self.epsilon_floor > 0:
            raise InputError("epsilon_floor must be positive")


def filter_activations(out: np.ndarray) -> np.ndarray:
    """(N, M) per-filter scalars: dense units as-is, conv maps by spatial mean."""
    if out.ndim == 4:
        return out.mean(axis=(2, 3))
    return out.reshape(out.shape[0], -1)


def connectivity(net: Network, probe: ProbeSet) -> FlowSnapshot:
    """Mean outer product of consecutive layers' per-filter activations."""
    if net.num_layers < 2:
        raise InputError("connectivity needs at least two layers")
    try:
        x = _as_batch(net, probe.inputs)
    except InputError as exc:
        raise InputError(f"probe does not fit the network: {exc}") from None
    _, _, outputs = _forward(net, x)
    acts = [filter_activations(o) for o in outputs]
    n = x.shape[0]
    mats = tuple(a.T @ b / n for a, b in zip(acts[:-1], acts[1:]))
    return FlowSnapshot("IF", mats, probe.probe_id)


def gradient_flow(net: Network, probe: ProbeSet) -> FlowSnapshot:
    """Masked mean-loss weight gradients over the probe set, without an update."""
    saved = (net.activation_cache, net.grad_cache, net.bias_grad_cache, net.loss_cache)
    try:
        grads = backward(net, probe.inputs, probe.labels)
    finally:
        net.activation_cache, net.grad_cache, net.bias_grad_cache, net.loss_cache = saved
    return FlowSnapshot("GF", tuple(g * m for g, m in zip(grads, net.masks)), probe.probe_id)


def compute_flow(net: Network, probe: ProbeSet, kind: str) -> FlowSnapshot:
    if kind == "IF":
        return connectivity(net, probe)
    if kind == "GF":
        return gradient_flow(net, probe)
    raise InputError(f"unknown flow kind {kind!r}")


def capture_reference(net: Network, probe: ProbeSet, kind: str) -> FlowSnapshot:
    """Snapshot of the trained dense network; arrays are copied and read-only."""
    snap = compute_flow(net, probe, kind)
    return FlowSnapshot(snap.kind, tuple(a.copy() for a in snap.layers), snap.probe_id)


def flow_distance(a: FlowSnapshot, b: FlowSnapshot,
                  cfg: FlowDistanceConfig | None = None) -> float:
    """Distance from snapshot ``a`` to reference ``b``."""
    cfg = cfg or FlowDistanceConfig()
    if a.kind != b.kind:
        raise InputError(f"cannot compare {a.kind} with {b.kind} snapshots")
    if a.probe_id != b.probe_id:
        raise InputError("snapshots were computed on different probe sets")
    if len(a.layers) != len(b.layers) or any(
            x.shape != y.shape for x, y in zip(a.layers, b.layers)):
        raise InputError("snapshot shapes differ")
    diffs = [float(np.linalg.norm(x - y)) for x, y in zip(a.layers, b.layers)]
    if cfg.norm_mode == "global_l2":
        return float(np.sqrt(sum(d * d for d in diffs)))
    rel = [d / (float(np.linalg.norm(y)) + cfg.epsilon_floor) for d, y in zip(diffs, b.layers)]
    return float(np.mean(rel))
