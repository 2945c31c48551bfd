from dataclasses import asdict, replace

import numpy as np
import pytest

from incop import imp, nn
from incop.data import BatchIterator
from incop.errors import ConfigError, DeadLayerError, InputError
from incop.flows import capture_reference, draw_probe
from incop.imp import (LTH, SAP, FixedEpochs, FlowEpsilon, ImpConfig, compute_layer_prune_counts,
                       magnitude_prune_layer, run_imp, train_reference, train_until_stop)
from incop.sparsity import PQConfig

SGD = nn.SgdConfig(0.05, 0.9, 0.0, 16)
SPECS = nn.mlp([8, 12, 6, 3])


def config(**kw):
    base = dict(T=3, E=3, finetune_epochs=1, method=SAP(PQConfig(0.5, 1.0, 1.0, 0.9)),
                stopping=FixedEpochs(3), sgd=SGD, seed=0, probe_size=64)
    base.update(kw)
    return ImpConfig(**base)


def records_without_time(result):
    return [{k: v for k, v in asdict(r).items() if k != "wall_ms"} for r in result.records]


def test_prune_smallest_magnitude():
    w = np.array([0.5, -0.1, 0.3, -0.4, 0.2])
    mask = magnitude_prune_layer(w, np.ones(5), 1)
    assert mask.tolist() == [1, 0, 1, 1, 1]
    assert magnitude_prune_layer(w, np.ones(5), 0).tolist() == [1] * 5


def test_prune_tie_goes_to_lowest_index():
    assert magnitude_prune_layer(np.array([0.1, -0.1, 0.2]), np.ones(3), 1).tolist() == [0, 1, 1]


def test_pruned_entries_never_revive():
    w = np.array([0.0, 5.0, 0.01, 3.0])
    mask = magnitude_prune_layer(w, np.array([0.0, 1, 1, 1]), 2)
    assert mask.tolist() == [0, 1, 0, 0]
    with pytest.raises(InputError):
        magnitude_prune_layer(w, np.array([0.0, 1, 1, 1]), 4)


def test_prune_keeps_tensor_shape():
    w = np.arange(12.0).reshape(3, 4) - 6
    mask = magnitude_prune_layer(w, np.ones((3, 4)), 5)
    assert mask.shape == (3, 4) and mask.sum() == 7


def test_lth_counts_and_stall_rule():
    net = nn.build_network([nn.dense(10, 1, "identity")], seed=0)
    assert compute_layer_prune_counts(net, LTH(0.2)) == [2]
    net.masks[0].ravel()[4:] = 0
    assert compute_layer_prune_counts(net, LTH(0.2)) == [0]
    assert compute_layer_prune_counts(net, LTH(0.2), stall_prune_one=True) == [1]
    net.masks[0].ravel()[1:] = 0
    assert compute_layer_prune_counts(net, LTH(0.2), stall_prune_one=True) == [0]


def test_sap_count_matches_sparsity_oracle():
    net = nn.build_network([nn.dense(4, 1, "identity")], seed=0)
    net.weights[0][:, 0] = [3.0, 1.0, 0.0, 0.0]
    assert compute_layer_prune_counts(net, SAP(PQConfig(1.0, 2.0, 1.0, 0.9))) == [2]


def test_sap_ignores_masked_coordinates():
    net = nn.build_network([nn.dense(6, 1, "identity")], seed=0)
    net.weights[0][:, 0] = [3.0, 1.0, 0.0, 0.0, 0.0, 0.0]
    net.masks[0][4:] = 0
    assert compute_layer_prune_counts(net, SAP(PQConfig(1.0, 2.0, 1.0, 0.9))) == [2]


def test_config_validation():
    with pytest.raises(ConfigError):
        config(T=0)
    with pytest.raises(ConfigError):
        config(rewind_to="start")
    with pytest.raises(ConfigError):
        LTH(1.0)
    with pytest.raises(ConfigError):
        FlowEpsilon("XF", 0.1, 3)
    with pytest.raises(ConfigError):
        FlowEpsilon("GF", 0.0, 3)
    with pytest.raises(ConfigError):
        FixedEpochs(0)


def _trained(toy_dataset):
    net = nn.build_network(SPECS, seed=0)
    batches = BatchIterator(toy_dataset.train_inputs, toy_dataset.train_labels, 16, 0)
    probe = draw_probe(toy_dataset.train_inputs, toy_dataset.train_labels, 32, 0)
    return net, batches, probe


def test_fixed_epochs_runs_exactly_e(toy_dataset):
    net, batches, _ = _trained(toy_dataset)
    res = train_until_stop(net, batches, FixedEpochs(4), SGD)
    assert res.epochs_used == 4 and res.distance_trace == []


def test_huge_epsilon_stops_after_one_epoch(toy_dataset):
    net, batches, probe = _trained(toy_dataset)
    ref = capture_reference(net, probe, "GF")
    res = train_until_stop(net, batches, FlowEpsilon("GF", 1e9, 5), SGD, ref, probe)
    assert res.epochs_used == 1 and len(res.distance_trace) == 1


def test_tiny_epsilon_runs_all_epochs_after_prune(toy_dataset):
    net, batches, probe = _trained(toy_dataset)
    ref = capture_reference(net, probe, "IF")
    imp.prune_network(net, compute_layer_prune_counts(net, LTH(0.2)))
    res = train_until_stop(net, batches, FlowEpsilon("IF", 1e-15, 4), SGD, ref, probe)
    assert res.epochs_used == 4
    assert all(d > 1e-15 for d in res.distance_trace)


def test_flow_stopping_needs_reference(toy_dataset):
    net, batches, probe = _trained(toy_dataset)
    with pytest.raises(ConfigError):
        train_until_stop(net, batches, FlowEpsilon("GF", 1.0, 2), SGD)
    with pytest.raises(ConfigError):
        train_until_stop(net, batches, FlowEpsilon("GF", 1.0, 2), SGD,
                         capture_reference(net, probe, "IF"), probe)


def test_single_lth_iteration_on_100_weights(toy_dataset):
    ds = toy_dataset
    specs = [nn.dense(8, 3, "identity")]
    cfg = config(T=1, method=LTH(0.2), finetune_epochs=0)
    res = run_imp(cfg, specs, ds)
    assert res.records[0].remaining_weights_total == 24 - 4
    square = replace(ds, train_inputs=np.tile(ds.train_inputs, (1, 25))[:, :100],
                     test_inputs=np.tile(ds.test_inputs, (1, 25))[:, :100], input_shape=(100,))
    res = run_imp(cfg, [nn.dense(100, 1, "identity")], square_labels(square))
    assert res.records[0].remaining_weights_total == 80


def square_labels(ds):
    # a single-output network can only be trained with one class
    return replace(ds, train_labels=np.zeros_like(ds.train_labels),
                   test_labels=np.zeros_like(ds.test_labels), num_classes=1)


def test_runs_are_deterministic(toy_dataset):
    cfg = config(stopping=FlowEpsilon("GF", 0.3, 3))
    a, b = run_imp(cfg, SPECS, toy_dataset), run_imp(cfg, SPECS, toy_dataset)
    assert records_without_time(a) == records_without_time(b)
    for wa, wb in zip(a.network.weights, b.network.weights):
        assert wa.tobytes() == wb.tobytes()


def test_masks_and_weights_consistent_every_iteration(toy_dataset):
    seen = []

    def check(t, net):
        for w, m in zip(net.weights, net.masks):
            assert np.array_equal(w, w * m)
        seen.append([m.copy() for m in net.masks])

    run_imp(config(T=4), SPECS, toy_dataset, checkpoint=check)
    for before, after in zip(seen, seen[1:]):
        for mb, ma in zip(before, after):
            assert np.all(ma <= mb)


def test_controlled_equality_sap_vs_flow(toy_dataset):
    cfg = config(T=4)
    ref = train_reference(cfg, SPECS, toy_dataset)
    sap = run_imp(cfg, SPECS, toy_dataset, ref)
    forced = run_imp(replace(cfg, stopping=FlowEpsilon("GF", 1e-15, 3)), SPECS, toy_dataset, ref)
    assert [r.epochs_used for r in forced.records] == [3] * 4
    assert ([r.remaining_weights_per_layer for r in sap.records]
            == [r.remaining_weights_per_layer for r in forced.records])
    assert [r.test_accuracy for r in sap.records] == [r.test_accuracy for r in forced.records]


def test_rewind_to_init_restores_surviving_values(toy_dataset):
    cfg = config(T=1, rewind_to="init", stopping=FixedEpochs(1))
    res = run_imp(cfg, SPECS, toy_dataset)
    init = res.reference.init_weights
    for w, m, w0 in zip(res.network.weights, res.network.masks, init.weights):
        np.testing.assert_array_equal(w, w0 * m)


def test_dead_layer_aborts(toy_dataset, monkeypatch):
    monkeypatch.setattr(imp, "compute_layer_prune_counts",
                        lambda net, method, stall=False: [int(np.count_nonzero(m)) for m in net.masks])
    with pytest.raises(DeadLayerError) as info:
        run_imp(config(T=2), SPECS, toy_dataset)
    assert info.value.layer == 0 and info.value.iteration == 1


def test_calibration_suggestions_are_ordered(toy_dataset):
    cfg = config()
    cal = imp.calibrate_epsilon(cfg, SPECS, toy_dataset, kinds=("GF", "IF"))
    for c in cal.values():
        s = c.suggestions
        assert s[0.05] < s[0.10] < s[0.25]
        assert s[0.10] == pytest.approx(0.1 * c.initial_distance)
        assert len(c.trace) == cfg.E + 1
