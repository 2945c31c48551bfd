"""Iterative magnitude pruning with fixed-epoch or flow-epsilon retraining.

The loop follows the usual prune/retrain cycle: train a dense reference,
then for each iteration retrain until the stopping criterion fires, compute
per-layer prune counts (LTH fixed rate or SAP adaptive), prune the smallest
surviving magnitudes and keep training from the masked current weights.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from .data import BatchIterator, Dataset
from .errors import ConfigError, DeadLayerError, InputError
from .flows import (FlowDistanceConfig, FlowSnapshot, ProbeSet, capture_reference,
                    compute_flow, draw_probe, flow_distance)
from .nn import (LayerSpec, Network, SgdConfig, WeightSnapshot, build_network,
                 evaluate_accuracy, network_from_snapshot, snapshot_weights, train_epoch)
from .sparsity import PQConfig, prune_count


@dataclass(frozen=True)
class LTH:
    rate: float = 0.2

    def __post_init__(self):
        if not 0 < self.rate < 1:
            raise ConfigError("LTH rate must lie in (0, 1)")


@dataclass(frozen=True)
class SAP:
    config: PQConfig


PruneMethod = Union[LTH, SAP]


@dataclass(frozen=True)
class FixedEpochs:
    epochs: int

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")

    @property
    def max_epochs(self) -> int:
        return self.epochs


@dataclass(frozen=True)
class FlowEpsilon:
    kind: str
    epsilon: float
    max_epochs: int
    dist_cfg: FlowDistanceConfig = field(default_factory=FlowDistanceConfig)

    def __post_init__(self):
        if self.kind not in ("IF", "GF"):
            raise ConfigError(f"flow kind must be IF or GF, got {self.kind!r}")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")


StoppingCriterion = Union[FixedEpochs, FlowEpsilon]


@dataclass
class ImpConfig:
    T: int
    E: int
    finetune_epochs: int
    method: PruneMethod
    stopping: StoppingCriterion
    sgd: SgdConfig = field(default_factory=SgdConfig)
    seed: int = 0
    trials: int = 1
    probe_size: int = 1024
    rewind_to: str = "none"
    stall_prune_one: bool = True

    def __post_init__(self):
        if self.T < 1 or self.trials < 1 or self.E < 1 or self.finetune_epochs < 0:
            raise ConfigError("need T >= 1, trials >= 1, E >= 1 and finetune_epochs >= 0")
        if self.rewind_to not in ("none", "init", "finetuned"):
            raise ConfigError(f"rewind_to must be none, init or finetuned, got {self.rewind_to!r}")


@dataclass
class EpochRecord:
    iteration: int
    epoch: int
    train_loss: float
    test_accuracy: float
    distance: float | None


@dataclass
class IterationRecord:
    iteration: int
    epochs_used: int
    test_accuracy: float
    train_loss: float
    remaining_weights_per_layer: list[int]
    remaining_weights_total: int
    flow_distance_trace: list[float]
    c_t_per_layer: list[int]
    wall_ms: float


@dataclass
class Reference:
    """Dense trained state shared by every method run from the same seed."""

    weights: WeightSnapshot
    init_weights: WeightSnapshot
    finetuned_weights: WeightSnapshot
    accuracy: float
    probe: ProbeSet
    flows: dict[str, FlowSnapshot]
    epochs: int


@dataclass
class TrainResult:
    epochs_used: int
    distance_trace: list[float]
    train_losses: list[float]


@dataclass
class ImpResult:
    records: list[IterationRecord]
    epochs: list[EpochRecord]
    network: Network
    reference: Reference


def magnitude_prune_layer(weights: np.ndarray, mask: np.ndarray, c: int) -> np.ndarray:
    """Zero the mask at the ``c`` smallest-magnitude surviving weights.

    Ties go to the lowest flat index. Already pruned entries stay pruned.
    """
    flat_mask = np.asarray(mask).ravel()
    alive = np.flatnonzero(flat_mask)
    if not 0 <= c <= alive.size:
        raise InputError(f"cannot prune {c} of {alive.size} surviving weights")
    new = np.array(mask, copy=True)
    if c == 0:
        return new
    mags = np.abs(np.asarray(weights).ravel()[alive])
    order = np.argsort(mags, kind="stable")  # alive is ascending, so ties keep index order
    new.ravel()[alive[order[:c]]] = 0
    return new


def compute_layer_prune_counts(net: Network, method: PruneMethod,
                               stall_prune_one: bool = False) -> list[int]:
    """Per-layer prune counts computed from each layer's surviving weights."""
    counts = []
    for idx, (w, m) in enumerate(zip(net.weights, net.masks)):
        surviving = w[m != 0]
        d = surviving.size
        if d == 0:
            raise InputError(f"layer {idx} has no surviving weights")
        if isinstance(method, LTH):
            c = math.floor(method.rate * d)
            if c == 0 and d > 1 and stall_prune_one:
                c = 1
        elif isinstance(method, SAP):
            c = prune_count(surviving, method.config) if np.any(surviving) else 0
        else:
            raise ConfigError(f"unknown prune method {method!r}")
        counts.append(c)
    return counts


def train_until_stop(net: Network, batches: BatchIterator, stopping: StoppingCriterion,
                     sgd: SgdConfig, reference: FlowSnapshot | None = None,
                     probe: ProbeSet | None = None, first_epoch: int = 0,
                     on_epoch: Callable[[int, float, float | None], None] | None = None,
                     ) -> TrainResult:
    """Train whole epochs until the stopping criterion is met.

    ``first_epoch`` offsets the shuffling seed so consecutive calls never
    repeat an epoch order. ``on_epoch(epoch, train_loss, distance)`` is called
    after every epoch (epochs count from 1).
    """
    if isinstance(stopping, FlowEpsilon):
        if reference is None or probe is None:
            raise ConfigError("flow_epsilon stopping needs a reference snapshot and probe set")
        if reference.kind != stopping.kind:
            raise ConfigError(f"reference is {reference.kind}, criterion wants {stopping.kind}")
    trace: list[float] = []
    losses: list[float] = []
    epochs = 0
    for e in range(1, stopping.max_epochs + 1):
        loss = train_epoch(net, batches.epoch(first_epoch + e - 1), sgd)
        losses.append(loss)
        epochs = e
        dist = None
        if isinstance(stopping, FlowEpsilon):
            dist = flow_distance(compute_flow(net, probe, stopping.kind), reference, stopping.dist_cfg)
            trace.append(dist)
        if on_epoch is not None:
            on_epoch(e, loss, dist)
        if dist is not None and dist <= stopping.epsilon:
            break
    return TrainResult(epochs, trace, losses)


def train_reference(config: ImpConfig, specs: Sequence[LayerSpec], dataset: Dataset,
                    kinds: Sequence[str] = ("IF", "GF")) -> Reference:
    """Initialise, fine-tune for k epochs, train E more epochs, capture flows."""
    net = build_network(specs, config.seed, dataset.input_shape)
    batches = BatchIterator(dataset.train_inputs, dataset.train_labels,
                            config.sgd.batch_size, config.seed)
    init = snapshot_weights(net)
    epoch = 0
    for _ in range(config.finetune_epochs):
        train_epoch(net, batches.epoch(epoch), config.sgd)
        epoch += 1
    finetuned = snapshot_weights(net)
    for _ in range(config.E):
        train_epoch(net, batches.epoch(epoch), config.sgd)
        epoch += 1
    acc = evaluate_accuracy(net, dataset.test_inputs, dataset.test_labels)
    probe = draw_probe(dataset.train_inputs, dataset.train_labels, config.probe_size, config.seed)
    flows = {kind: capture_reference(net, probe, kind)
             for kind in kinds if kind != "IF" or net.num_layers >= 2}
    return Reference(snapshot_weights(net), init, finetuned, acc, probe, flows, epoch)


def _survivors(net: Network) -> list[int]:
    return [int(np.count_nonzero(m)) for m in net.masks]


def prune_network(net: Network, counts: Sequence[int]) -> None:
    """Apply per-layer magnitude pruning and re-mask the weights in place."""
    for i, c in enumerate(counts):
        net.masks[i] = magnitude_prune_layer(net.weights[i], net.masks[i], c)
        net.weights[i] *= net.masks[i]
        if net.velocity is not None:
            net.velocity[i] *= net.masks[i]


def run_imp(config: ImpConfig, specs: Sequence[LayerSpec], dataset: Dataset,
            reference: Reference | None = None,
            checkpoint: Callable[[int, Network], None] | None = None) -> ImpResult:
    """Run the full prune/retrain loop for one seed.

    A precomputed ``reference`` (from :func:`train_reference` with the same
    seed and training settings) skips the dense phase.
    """
    if reference is None:
        kinds = (config.stopping.kind,) if isinstance(config.stopping, FlowEpsilon) else ()
        reference = train_reference(config, specs, dataset, kinds)
    flow_ref = None
    if isinstance(config.stopping, FlowEpsilon):
        flow_ref = reference.flows.get(config.stopping.kind)
        if flow_ref is None:
            raise ConfigError(f"reference has no {config.stopping.kind} snapshot")

    net = network_from_snapshot(reference.weights)
    net.reset_optimizer()
    batches = BatchIterator(dataset.train_inputs, dataset.train_labels,
                            config.sgd.batch_size, config.seed)
    rewind = {"init": reference.init_weights,
              "finetuned": reference.finetuned_weights}.get(config.rewind_to)
    epoch_index = reference.epochs
    records: list[IterationRecord] = []
    epoch_log: list[EpochRecord] = []

    for t in range(1, config.T + 1):
        start = time.perf_counter()
        net.reset_optimizer()

        def log_epoch(e, loss, dist, t=t):
            acc = evaluate_accuracy(net, dataset.test_inputs, dataset.test_labels)
            epoch_log.append(EpochRecord(t, e, loss, acc, dist))

        result = train_until_stop(net, batches, config.stopping, config.sgd,
                                  flow_ref, reference.probe, epoch_index, log_epoch)
        epoch_index += result.epochs_used
        acc = epoch_log[-1].test_accuracy

        counts = compute_layer_prune_counts(net, config.method, config.stall_prune_one)
        prune_network(net, counts)
        if rewind is not None:
            for i in range(net.num_layers):
                net.weights[i] = rewind.weights[i] * net.masks[i]
                net.biases[i] = rewind.biases[i].copy()
        survivors = _survivors(net)
        for layer, s in enumerate(survivors):
            if s == 0:
                raise DeadLayerError(layer, t)
        records.append(IterationRecord(
            iteration=t,
            epochs_used=result.epochs_used,
            test_accuracy=acc,
            train_loss=result.train_losses[-1],
            remaining_weights_per_layer=survivors,
            remaining_weights_total=sum(survivors),
            flow_distance_trace=result.distance_trace,
            c_t_per_layer=list(counts),
            wall_ms=(time.perf_counter() - start) * 1e3,
        ))
        if checkpoint is not None:
            checkpoint(t, net)
    return ImpResult(records, epoch_log, net, reference)


@dataclass
class Calibration:
    kind: str
    initial_distance: float
    trace: list[float]
    suggestions: dict[float, float]


def calibrate_epsilon(config: ImpConfig, specs: Sequence[LayerSpec], dataset: Dataset,
                      kinds: Sequence[str] = ("GF",), reference: Reference | None = None,
                      fractions: Sequence[float] = (0.05, 0.10, 0.25)) -> dict[str, Calibration]:
    """Suggest epsilon values as fractions of the post-first-prune flow distance.

    Iteration 1 runs with fixed epochs and is pruned with the configured
    method; the distance right after that prune is the initial distance,
    followed by the distances over E fixed retraining epochs.
    """
    if reference is None:
        reference = train_reference(config, specs, dataset, kinds)
    net = network_from_snapshot(reference.weights)
    net.reset_optimizer()
    batches = BatchIterator(dataset.train_inputs, dataset.train_labels,
                            config.sgd.batch_size, config.seed)
    fixed = FixedEpochs(config.stopping.max_epochs)
    epoch_index = reference.epochs
    train_until_stop(net, batches, fixed, config.sgd, first_epoch=epoch_index)
    epoch_index += fixed.epochs
    prune_network(net, compute_layer_prune_counts(net, config.method, config.stall_prune_one))
    net.reset_optimizer()

    dist_cfg = (config.stopping.dist_cfg if isinstance(config.stopping, FlowEpsilon)
                else FlowDistanceConfig())
    traces = {k: [flow_distance(compute_flow(net, reference.probe, k), reference.flows[k], dist_cfg)]
              for k in kinds}

    def log(e, loss, dist):
        for k in kinds:
            traces[k].append(flow_distance(compute_flow(net, reference.probe, k),
                                           reference.flows[k], dist_cfg))

    train_until_stop(net, batches, fixed, config.sgd, first_epoch=epoch_index, on_epoch=log)
    out = {}
    for k in kinds:
        d0 = traces[k][0]
        out[k] = Calibration(k, d0, traces[k], {f: f * d0 for f in fractions})
    return out
