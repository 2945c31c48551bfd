"""Small deterministic network engine with masked parameters.

Layers are dense (``x @ W + b``, ``W`` shaped ``(fan_in, fan_out)``) or valid
2-D convolutions with stride 1 (``W`` shaped ``(out, in, kh, kw)``). Every weight
tensor carries a binary mask of the same shape; masked weights and their
gradients are held at exactly zero. Biases are trained but never masked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .errors import ConfigError, InputError, StateError

ACTIVATIONS = ("relu", "identity")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_size: int
    out_size: int
    kernel: tuple[int, int] = (1, 1)
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in ("dense", "conv2d"):
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        dims = (self.in_size, self.out_size, *self.kernel)
        if any(int(d) < 1 for d in dims):
            raise ConfigError(f"layer dimensions must be >= 1, got {dims}")

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "dense":
            return (self.in_size, self.out_size)
        return (self.out_size, self.in_size, *self.kernel)

    @property
    def fan_in(self) -> int:
        if self.kind == "dense":
            return self.in_size
        return self.in_size * self.kernel[0] * self.kernel[1]


def dense(fan_in: int, fan_out: int, activation: str = "relu") -> LayerSpec:
    return LayerSpec("dense", fan_in, fan_out, (1, 1), activation)


def conv2d(in_channels: int, out_channels: int, kernel_h: int,
           kernel_w: int | None = None, activation: str = "relu") -> LayerSpec:
    return LayerSpec("conv2d", in_channels, out_channels,
                     (kernel_h, kernel_h if kernel_w is None else kernel_w), activation)


def mlp(widths: Sequence[int]) -> list[LayerSpec]:
    """ReLU MLP with an identity (logits) output layer."""
    if len(widths) < 2:
        raise ConfigError("an MLP needs at least input and output widths")
    specs = [dense(a, b) for a, b in zip(widths[:-2], widths[1:-1])]
    specs.append(dense(widths[-2], widths[-1], "identity"))
    return specs


@dataclass
class SgdConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 64

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be a positive integer")


@dataclass
class Network:
    layers: list[LayerSpec]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    masks: list[np.ndarray]
    input_shape: tuple[int, ...]
    # per-layer output shapes without the batch dimension
    output_shapes: list[tuple[int, ...]]
    rng: np.random.Generator = field(repr=False, default_factory=np.random.default_rng)
    activation_cache: list[np.ndarray] | None = field(default=None, repr=False)
    grad_cache: list[np.ndarray] | None = field(default=None, repr=False)
    bias_grad_cache: list[np.ndarray] | None = field(default=None, repr=False)
    velocity: list[np.ndarray] | None = field(default=None, repr=False)
    bias_velocity: list[np.ndarray] | None = field(default=None, repr=False)
    loss_cache: float | None = None

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def dtype(self):
        return self.weights[0].dtype

    def survivors(self) -> list[int]:
        return [int(np.count_nonzero(m)) for m in self.masks]

    def density(self) -> float:
        return sum(self.survivors()) / sum(m.size for m in self.masks)

    def reset_optimizer(self) -> None:
        self.velocity = None
        self.bias_velocity = None


def _output_shapes(specs: Sequence[LayerSpec], input_shape: tuple[int, ...] | None):
    """Check adjacent-layer compatibility; return output shapes when derivable."""
    shapes: list[tuple[int, ...]] = []
    cur = input_shape
    for idx, spec in enumerate(specs):
        if spec.kind == "dense":
            if cur is not None and math.prod(cur) != spec.in_size:
                raise ConfigError(
                    f"layer {idx}: dense fan_in {spec.in_size} does not match "
                    f"incoming size {math.prod(cur)}")
            cur = (spec.out_size,)
        else:
            if cur is None:
                raise ConfigError(f"layer {idx}: conv2d needs a known input shape")
            if len(cur) != 3:
                raise ConfigError(f"layer {idx}: conv2d cannot follow a dense layer")
            c, h, w = cur
            kh, kw = spec.kernel
            if c != spec.in_size:
                raise ConfigError(
                    f"layer {idx}: conv2d expects {spec.in_size} channels, got {c}")
            if h < kh or w < kw:
                raise ConfigError(f"layer {idx}: kernel {spec.kernel} larger than input {h}x{w}")
            cur = (spec.out_size, h - kh + 1, w - kw + 1)
        shapes.append(cur)
    return shapes


def build_network(specs: Sequence[LayerSpec], seed: int,
                  input_shape: Sequence[int] | None = None,
                  dtype=np.float64) -> Network:
    """He-uniform initialised network with all-ones masks and zero biases."""
    specs = list(specs)
    if not specs:
        raise ConfigError("at least one layer is required")
    if input_shape is None:
        if specs[0].kind == "conv2d":
            raise ConfigError("input_shape is required when the first layer is conv2d")
        input_shape = (specs[0].in_size,)
    input_shape = tuple(int(d) for d in input_shape)
    shapes = _output_shapes(specs, input_shape)

    rng = np.random.default_rng(seed)
    weights, biases, masks = [], [], []
    for spec in specs:
        bound = math.sqrt(6.0 / spec.fan_in)
        weights.append(rng.uniform(-bound, bound, size=spec.weight_shape).astype(dtype))
        biases.append(np.zeros(spec.out_size, dtype=dtype))
        masks.append(np.ones(spec.weight_shape, dtype=dtype))
    return Network(specs, weights, biases, masks, input_shape, shapes, rng)


def _as_batch(net: Network, x) -> np.ndarray:
    x = np.asarray(x, dtype=net.dtype)
    size = math.prod(net.input_shape)
    if x.ndim < 2 or math.prod(x.shape[1:]) != size:
        raise InputError(f"input shape {x.shape} incompatible with network input {net.input_shape}")
    return x.reshape((x.shape[0], *net.input_shape))


def _forward(net: Network, x: np.ndarray):
    """Return (logits, layer inputs, layer outputs)."""
    inputs, outputs = [], []
    h = x
    for spec, w, b in zip(net.layers, net.weights, net.biases):
        if spec.kind == "dense":
            h = h.reshape(h.shape[0], -1)
            inputs.append(h)
            z = h @ w + b
        else:
            h = np.ascontiguousarray(h)
            inputs.append(h)
            z = kernels.conv2d_forward(h, w) + b[None, :, None, None]
        h = np.maximum(z, 0) if spec.activation == "relu" else z
        outputs.append(h)
    return h, inputs, outputs


def forward(net: Network, batch_inputs) -> np.ndarray:
    """Logits for a batch; fills ``activation_cache`` with every layer's output."""
    logits, _, outputs = _forward(net, _as_batch(net, batch_inputs))
    net.activation_cache = outputs
    return logits


def predict(net: Network, batch_inputs) -> np.ndarray:
    """Logits without touching the network's caches."""
    return _forward(net, _as_batch(net, batch_inputs))[0]


def _check_labels(logits: np.ndarray, labels) -> np.ndarray:
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise InputError(f"logits {logits.shape} and labels {labels.shape} disagree")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise InputError(f"labels must lie in [0, {logits.shape[1]})")
    return labels.astype(np.int64)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss_softmax_ce(logits, labels) -> float:
    """Mean softmax cross-entropy."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(logits, labels)
    if labels.size == 0:
        raise InputError("empty batch")
    logp = _log_softmax(logits)
    return float(-logp[np.arange(labels.size), labels].mean())


def backward(net: Network, batch_inputs, labels) -> list[np.ndarray]:
    """Backpropagate mean cross-entropy; fill and return masked weight gradients.

    The forward pass is recomputed on ``batch_inputs`` so caches always refer
    to the same batch.
    """
    x = _as_batch(net, batch_inputs)
    logits, inputs, outputs = _forward(net, x)
    labels = _check_labels(logits, labels)
    n = labels.size
    if n == 0:
        raise InputError("empty batch")
    logp = _log_softmax(logits)
    net.loss_cache = float(-logp[np.arange(n), labels].mean())

    delta = np.exp(logp)
    delta[np.arange(n), labels] -= 1.0
    delta /= n

    grads: list[np.ndarray] = [None] * net.num_layers  # type: ignore[list-item]
    bias_grads: list[np.ndarray] = [None] * net.num_layers  # type: ignore[list-item]
    for i in range(net.num_layers - 1, -1, -1):
        spec, w = net.layers[i], net.weights[i]
        if spec.activation == "relu":
            delta = delta * (outputs[i] > 0)
        xin = inputs[i]
        if spec.kind == "dense":
            grads[i] = (xin.T @ delta) * net.masks[i]
            bias_grads[i] = delta.sum(axis=0)
            if i:
                delta = (delta @ w.T).reshape(outputs[i - 1].shape)
        else:
            delta = np.ascontiguousarray(delta)
            kh, kw = spec.kernel
            grads[i] = kernels.conv2d_backward_weight(delta, xin, kh, kw) * net.masks[i]
            bias_grads[i] = delta.sum(axis=(0, 2, 3))
            if i:
                delta = kernels.conv2d_backward_input(
                    delta, w, xin.shape[2], xin.shape[3]).reshape(outputs[i - 1].shape)

    net.activation_cache = outputs
    net.grad_cache = grads
    net.bias_grad_cache = bias_grads
    return grads


def sgd_step(net: Network, cfg: SgdConfig) -> None:
    """One masked momentum-SGD update from the cached gradients."""
    if net.grad_cache is None or net.bias_grad_cache is None:
        raise StateError("sgd_step called before backward")
    if net.velocity is None or net.bias_velocity is None:
        net.velocity = [np.zeros_like(w) for w in net.weights]
        net.bias_velocity = [np.zeros_like(b) for b in net.biases]
    lr, mom, wd = cfg.learning_rate, cfg.momentum, cfg.weight_decay
    for i in range(net.num_layers):
        v = net.velocity[i]
        v *= mom
        v += net.grad_cache[i]
        v *= net.masks[i]
        w = net.weights[i]
        w -= lr * (v + wd * w) if wd else lr * v
        w *= net.masks[i]

        bv = net.bias_velocity[i]
        bv *= mom
        bv += net.bias_grad_cache[i]
        b = net.biases[i]
        b -= lr * (bv + wd * b) if wd else lr * bv


def train_epoch(net: Network, batches: Iterable[tuple[np.ndarray, np.ndarray]],
                cfg: SgdConfig) -> float:
    """Run one pass over ``batches``; return the sample-weighted mean loss."""
    total, count = 0.0, 0
    for xb, yb in batches:
        backward(net, xb, yb)
        sgd_step(net, cfg)
        total += net.loss_cache * len(yb)
        count += len(yb)
    return total / count if count else 0.0


def evaluate_accuracy(net: Network, inputs, labels, batch_size: int = 2048) -> float:
    """Fraction of samples whose argmax logit equals the label."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise InputError("cannot evaluate on an empty dataset")
    inputs = _as_batch(net, inputs)
    if inputs.shape[0] != labels.size:
        raise InputError("inputs and labels differ in length")
    correct = 0
    for start in range(0, labels.size, batch_size):
        logits = predict(net, inputs[start:start + batch_size])
        correct += int((logits.argmax(axis=1) == labels[start:start + batch_size]).sum())
    return correct / labels.size


def evaluate_loss(net: Network, inputs, labels, batch_size: int = 2048) -> float:
    labels = np.asarray(labels)
    inputs = _as_batch(net, inputs)
    total = 0.0
    for start in range(0, labels.size, batch_size):
        yb = labels[start:start + batch_size]
        total += loss_softmax_ce(predict(net, inputs[start:start + batch_size]), yb) * yb.size
    return total / labels.size


@dataclass
class WeightSnapshot:
    layers: list[LayerSpec]
    input_shape: tuple[int, ...]
    weights: list[np.ndarray]
    masks: list[np.ndarray]
    biases: list[np.ndarray]
    velocity: list[np.ndarray] | None = None
    bias_velocity: list[np.ndarray] | None = None
    rng_state: dict | None = None


def _copy_list(arrs):
    return None if arrs is None else [a.copy() for a in arrs]


def snapshot_weights(net: Network) -> WeightSnapshot:
    return WeightSnapshot(
        layers=list(net.layers),
        input_shape=net.input_shape,
        weights=_copy_list(net.weights),
        masks=_copy_list(net.masks),
        biases=_copy_list(net.biases),
        velocity=_copy_list(net.velocity),
        bias_velocity=_copy_list(net.bias_velocity),
        rng_state=net.rng.bit_generator.state,
    )


def restore_weights(net: Network, snap: WeightSnapshot) -> None:
    if len(snap.weights) != net.num_layers or any(
            a.shape != w.shape for a, w in zip(snap.weights, net.weights)):
        raise StateError("snapshot does not match the network's parameter shapes")
    if any(a.shape != b.shape for a, b in zip(snap.biases, net.biases)):
        raise StateError("snapshot does not match the network's bias shapes")
    net.weights = [w.astype(net.dtype, copy=True) for w in snap.weights]
    net.masks = [m.astype(net.dtype, copy=True) for m in snap.masks]
    net.biases = [b.astype(net.dtype, copy=True) for b in snap.biases]
    net.velocity = _copy_list(snap.velocity)
    net.bias_velocity = _copy_list(snap.bias_velocity)
    if snap.rng_state is not None:
        net.rng.bit_generator.state = snap.rng_state
    net.activation_cache = net.grad_cache = net.bias_grad_cache = None


def network_from_snapshot(snap: WeightSnapshot, dtype=None) -> Network:
    dtype = dtype or snap.weights[0].dtype
    net = build_network(snap.layers, 0, snap.input_shape, dtype=dtype)
    restore_weights(net, snap)
    return net
