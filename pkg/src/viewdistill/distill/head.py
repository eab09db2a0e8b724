"""Small MLP projection head with manual backprop.

Serialized layout (little endian)::

    magic b"VDPH" | u16 version=1 | u32 n_layers | n_layers x (u32 fan_in, u32 fan_out)
    then per layer: fan_in*fan_out f32 weights (row-major, fan_in rows), fan_out f32 biases
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import FormatError, TruncationError, ValidationError

HEAD_MAGIC = b"VDPH"
HEAD_VERSION = 1
_HEADER = struct.Struct("<4sHI")
_DIMS = struct.Struct("<II")


@dataclass
class ProjectionHead:
    weights: list
    biases: list

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValidationError("head needs matching, non-empty weight and bias lists")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape[1] != b.shape[0]:
                raise ValidationError(f"layer {i}: weight/bias shape mismatch")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValidationError(f"layer {i}: fan-in does not match previous layer")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValidationError(f"layer {i}: non-finite parameters")

    @classmethod
    def init(cls, dims: Sequence[int], rng: np.random.Generator) -> "ProjectionHead":
        """He-initialised weights, zero biases. ``dims`` lists every layer width, input first."""
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ValidationError(f"bad head dims {dims}")
        ws, bs = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            ws.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
            bs.append(np.zeros(fan_out))
        return cls(ws, bs)

    @classmethod
    def identity(cls, dim: int) -> "ProjectionHead":
        return cls([np.eye(dim)], [np.zeros(dim)])

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    def copy(self) -> "ProjectionHead":
        return ProjectionHead([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def forward(self, X: np.ndarray, keep: bool = False):
        h = np.asarray(X, dtype=np.float64)
        acts = [h]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return (h, acts) if keep else h

    __call__ = forward

    def backward(self, acts: list, d_out: np.ndarray) -> list[np.ndarray]:
        """Gradients in ``params()`` order given the activations kept by ``forward``."""
        grads: list[np.ndarray] = []
        g = d_out
        for i in range(len(self.weights) - 1, -1, -1):
            if i < len(self.weights) - 1:
                g = g * (acts[i + 1] > 0)
            grads.append(g.sum(axis=0))
            grads.append(acts[i].T @ g)
            g = g @ self.weights[i].T
        grads.reverse()
        return grads

    def step(self, grads: Sequence[np.ndarray], lr: float) -> None:
        for p, g in zip(self.params(), grads):
            p -= lr * g

    def to_bytes(self) -> bytes:
        out = [_HEADER.pack(HEAD_MAGIC, HEAD_VERSION, len(self.weights))]
        out += [_DIMS.pack(*w.shape) for w in self.weights]
        for w, b in zip(self.weights, self.biases):
            out.append(w.astype("<f4").tobytes())
            out.append(b.astype("<f4").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ProjectionHead":
        if len(data) < _HEADER.size:
            raise TruncationError("head file shorter than its header")
        magic, version, n = _HEADER.unpack_from(data)
        if magic != HEAD_MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        if version != HEAD_VERSION:
            raise FormatError(f"unsupported head version {version}")
        off = _HEADER.size
        if n < 1 or len(data) < off + n * _DIMS.size:
            raise TruncationError("head layer table truncated")
        shapes = [_DIMS.unpack_from(data, off + i * _DIMS.size) for i in range(n)]
        off += n * _DIMS.size
        need = sum(4 * (a * b + b) for a, b in shapes)
        if len(data) - off != need:
            raise TruncationError(f"head payload is {len(data) - off} bytes, expected {need}")
        ws, bs = [], []
        for a, b in shapes:
            ws.append(np.frombuffer(data, "<f4", a * b, off).reshape(a, b).astype(np.float64))
            off += 4 * a * b
            bs.append(np.frombuffer(data, "<f4", b, off).astype(np.float64))
            off += 4 * b
        return cls(ws, bs)
