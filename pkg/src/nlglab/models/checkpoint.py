"""Binary checkpoint format for :class:`ScoreNet`.

Layout (little-endian)::

    b"NLGM" | version u16 | parameterization u8
    schedule: kind u8 | T u32 | sigma_max f64 | T x f64 per-step values
    cond_vocab_size u32 | layer_count u16
    per layer: rows u32 | cols u32 | rows*cols f32 weights (row-major) | rows f32 biases

Layer 0 is the condition embedding (one column per vocabulary entry); the
rest are the MLP body. Time-feature width is implied by the first body layer.
"""
from __future__ import annotations

import struct

import numpy as np

from ..schedules import NoiseSchedule, ScheduleKind
from .mlp import Parameterization, ScoreNet

MAGIC = b"NLGM"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(net: ScoreNet) -> bytes:
    s = net.schedule
    parts = [MAGIC, struct.pack("<HB", VERSION, int(net.parameterization)),
             struct.pack("<BId", int(s.kind), s.num_steps, float(s.sigma_max)),
             np.asarray(s.values, dtype="<f8").tobytes(),
             struct.pack("<IH", net.cond_vocab_size, len(net.layers))]
    for w, b in net.layers:
        rows, cols = w.shape
        parts.append(struct.pack("<II", rows, cols))
        parts.append(np.asarray(w, dtype="<f4").tobytes())
        parts.append(np.asarray(b, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, count):
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).astype(np.float64)


def loads(data: bytes) -> ScoreNet:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("not an NLGM checkpoint")
    version, param = r.unpack("<HB")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    kind, t, sigma_max = r.unpack("<BId")
    schedule = NoiseSchedule(ScheduleKind(kind), r.array("<f8", t), sigma_max)
    vocab, nlayers = r.unpack("<IH")
    layers = []
    for _ in range(nlayers):
        rows, cols = r.unpack("<II")
        w = r.array("<f4", rows * cols).reshape(rows, cols)
        b = r.array("<f4", rows)
        layers.append((w, b))
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after last layer")
    if not layers or layers[0][0].shape[1] != vocab:
        raise CheckpointError("embedding layer does not match vocabulary size")
    dim = layers[-1][0].shape[0]
    time_dim = layers[1][0].shape[1] - dim - layers[0][0].shape[0]
    return ScoreNet(layers, Parameterization(param), schedule, vocab - 3, time_dim)


def save(net: ScoreNet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(net))


def load(path) -> ScoreNet:
    with open(path, "rb") as fh:
        return loads(fh.read())
