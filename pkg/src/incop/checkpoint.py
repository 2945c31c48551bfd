"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    b"INCOPCKPT"  u16 version  u8 dtype  u32 layer_count
    input shape:   u8 ndim, ndim * u32
    per layer:     u8 kind, u8 activation, u32 in, u32 out, u32 kh, u32 kw,
                   f8[...] weights, u8[...] mask, f8[...] bias
    optimizer:     u8 has_velocity, then per layer f8 velocity, f8 bias velocity
    rng state:     u32 length, utf-8 JSON
    sections:      u32 count, then per section 4-byte tag + u64 length + payload

Section tags: ``FLOW`` (a flow snapshot with a role string) and ``PROB`` (the
probe set it was computed on).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .flows import FlowSnapshot, ProbeSet
from .nn import LayerSpec, Network, WeightSnapshot, network_from_snapshot, snapshot_weights

MAGIC = b"INCOPCKPT"
VERSION = 1
_KINDS = ("dense", "conv2d")
_ACTS = ("relu", "identity")
_DTYPES = (np.dtype("<f8"), np.dtype("<f4"))


@dataclass
class Checkpoint:
    snapshot: WeightSnapshot
    flows: list[tuple[str, FlowSnapshot]] = field(default_factory=list)
    probe: ProbeSet | None = None

    def network(self) -> Network:
        return network_from_snapshot(self.snapshot)

    def flow(self, role: str, kind: str) -> FlowSnapshot | None:
        for r, snap in self.flows:
            if r == role and snap.kind == kind:
                return snap
        return None


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint at byte offset {self.pos} (need {n} bytes)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, shape) -> np.ndarray:
        dtype = np.dtype(dtype)
        count = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self.take(count * dtype.itemsize), dtype=dtype).reshape(shape).copy()

    def string(self) -> str:
        (n,) = self.unpack("I")
        return self.take(n).decode("utf-8")


def _write_str(out: io.BytesIO, s: str) -> None:
    raw = s.encode("utf-8")
    out.write(struct.pack("<I", len(raw)) + raw)


def _write_shape(out: io.BytesIO, shape) -> None:
    out.write(struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape))


def _read_shape(r: _Reader) -> tuple[int, ...]:
    (ndim,) = r.unpack("B")
    return tuple(r.unpack(f"{ndim}I")) if ndim else ()


def _flow_payload(role: str, snap: FlowSnapshot) -> bytes:
    out = io.BytesIO()
    _write_str(out, role)
    _write_str(out, snap.kind)
    _write_str(out, snap.probe_id)
    out.write(struct.pack("<I", len(snap.layers)))
    for arr in snap.layers:
        _write_shape(out, arr.shape)
        out.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return out.getvalue()


def _probe_payload(probe: ProbeSet) -> bytes:
    out = io.BytesIO()
    out.write(struct.pack("<q", probe.seed))
    _write_shape(out, probe.inputs.shape)
    out.write(np.ascontiguousarray(probe.inputs, dtype="<f8").tobytes())
    out.write(struct.pack("<I", len(probe.labels)))
    out.write(np.ascontiguousarray(probe.labels, dtype="<i8").tobytes())
    return out.getvalue()


def dumps(snapshot: WeightSnapshot, flows=(), probe: ProbeSet | None = None) -> bytes:
    out = io.BytesIO()
    dtype = np.dtype(snapshot.weights[0].dtype).newbyteorder("<")
    out.write(MAGIC)
    out.write(struct.pack("<HBI", VERSION, _DTYPES.index(dtype), len(snapshot.layers)))
    _write_shape(out, snapshot.input_shape)
    for spec, w, m, b in zip(snapshot.layers, snapshot.weights, snapshot.masks, snapshot.biases):
        out.write(struct.pack("<BBIIII", _KINDS.index(spec.kind), _ACTS.index(spec.activation),
                              spec.in_size, spec.out_size, *spec.kernel))
        out.write(np.ascontiguousarray(w, dtype=dtype).tobytes())
        out.write(np.ascontiguousarray(m != 0, dtype=np.uint8).tobytes())
        out.write(np.ascontiguousarray(b, dtype=dtype).tobytes())
    has_velocity = snapshot.velocity is not None and snapshot.bias_velocity is not None
    out.write(struct.pack("<B", int(has_velocity)))
    if has_velocity:
        for v, bv in zip(snapshot.velocity, snapshot.bias_velocity):
            out.write(np.ascontiguousarray(v, dtype=dtype).tobytes())
            out.write(np.ascontiguousarray(bv, dtype=dtype).tobytes())
    _write_str(out, json.dumps(snapshot.rng_state, sort_keys=True) if snapshot.rng_state else "")

    sections = [(b"FLOW", _flow_payload(role, snap)) for role, snap in flows]
    if probe is not None:
        sections.append((b"PROB", _probe_payload(probe)))
    out.write(struct.pack("<I", len(sections)))
    for tag, payload in sections:
        out.write(tag + struct.pack("<Q", len(payload)) + payload)
    return out.getvalue()


def loads(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise FormatError("bad checkpoint magic at byte offset 0")
    version, dtype_code, nlayers = r.unpack("HBI")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at byte offset {len(MAGIC)}")
    if dtype_code >= len(_DTYPES):
        raise FormatError(f"unknown dtype code {dtype_code} at byte offset {len(MAGIC) + 2}")
    dtype = _DTYPES[dtype_code]
    input_shape = _read_shape(r)
    layers, weights, masks, biases = [], [], [], []
    for _ in range(nlayers):
        kind, act, n_in, n_out, kh, kw = r.unpack("BBIIII")
        spec = LayerSpec(_KINDS[kind], n_in, n_out, (kh, kw), _ACTS[act])
        layers.append(spec)
        weights.append(r.array(dtype, spec.weight_shape).astype(dtype.newbyteorder("=")))
        masks.append(r.array(np.uint8, spec.weight_shape).astype(weights[-1].dtype))
        biases.append(r.array(dtype, (n_out,)).astype(dtype.newbyteorder("=")))
    (has_velocity,) = r.unpack("B")
    velocity = bias_velocity = None
    if has_velocity:
        velocity, bias_velocity = [], []
        for spec in layers:
            velocity.append(r.array(dtype, spec.weight_shape).astype(dtype.newbyteorder("=")))
            bias_velocity.append(r.array(dtype, (spec.out_size,)).astype(dtype.newbyteorder("=")))
    rng_raw = r.string()
    rng_state = json.loads(rng_raw) if rng_raw else None
    snapshot = WeightSnapshot(layers, input_shape, weights, masks, biases,
                              velocity, bias_velocity, rng_state)

    ckpt = Checkpoint(snapshot)
    (nsections,) = r.unpack("I")
    for _ in range(nsections):
        tag = r.take(4)
        (length,) = r.unpack("Q")
        body = _Reader(r.take(length))
        if tag == b"FLOW":
            role, kind, probe_id = body.string(), body.string(), body.string()
            (n,) = body.unpack("I")
            mats = tuple(body.array("<f8", _read_shape(body)).astype(np.float64) for _ in range(n))
            ckpt.flows.append((role, FlowSnapshot(kind, mats, probe_id)))
        elif tag == b"PROB":
            (seed,) = body.unpack("q")
            inputs = body.array("<f8", _read_shape(body)).astype(np.float64)
            (n,) = body.unpack("I")
            labels = body.array("<i8", (n,)).astype(np.int64)
            ckpt.probe = ProbeSet(inputs, labels, seed)
        # unknown tags are skipped for forward compatibility
    if r.pos != len(buf):
        raise FormatError(f"trailing bytes at byte offset {r.pos}")
    return ckpt


def save(path, net_or_snapshot, flows=(), probe: ProbeSet | None = None) -> None:
    snap = (snapshot_weights(net_or_snapshot) if isinstance(net_or_snapshot, Network)
            else net_or_snapshot)
    Path(path).write_bytes(dumps(snap, flows, probe))


def load(path) -> Checkpoint:
    return loads(Path(path).read_bytes())
