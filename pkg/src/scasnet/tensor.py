"""Tensor helpers, the parameter/gradient pair, and the binary tensor format.

Tensors are plain ``numpy.ndarray`` objects laid out batch x channel x
height x width, row-major.
"""
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SCASTNSR"


class ShapeError(ValueError):
    """Raised when tensor shapes do not satisfy an operation's contract."""


class BackwardError(RuntimeError):
    """Raised when backward is called without a cached forward pass."""


class NumericalError(FloatingPointError):
    """Raised when a non-finite value appears."""


def tensor_new(shape, fill=0.0, dtype=np.float64):
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ShapeError(f"all dimensions must be positive, got {shape}")
    return np.full(shape, fill, dtype=dtype)


def elementwise_sum(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"cannot sum tensors of shapes {a.shape} and {b.shape}")
    return a + b


def check_finite(x, what="tensor"):
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values in {what}")
    return x


class Param:
    """A trainable value with its accumulated gradient."""

    def __init__(self, value, name="", decay=True):
        self.value = value
        self.grad = np.zeros_like(value)
        self.name = name
        self.decay = decay

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g):
        if g.shape != self.value.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {self.name} {self.value.shape}")
        self.grad += g

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape})"


def to_bytes(x):
    x = np.asarray(x, dtype="<f8")
    header = MAGIC + struct.pack("<I", x.ndim) + struct.pack(f"<{x.ndim}I", *x.shape)
    return header + np.ascontiguousarray(x).tobytes()


def from_bytes(buf):
    if buf[:8] != MAGIC:
        raise ValueError("not a tensor file (bad magic)")
    (rank,) = struct.unpack_from("<I", buf, 8)
    dims = struct.unpack_from(f"<{rank}I", buf, 12)
    offset = 12 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    if len(buf) - offset != 8 * count:
        raise ValueError(f"tensor payload has {len(buf) - offset} bytes, expected {8 * count}")
    return np.frombuffer(buf, dtype="<f8", count=count, offset=offset).reshape(dims).astype(np.float64)


def save_tensor(path, x):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(x))


def load_tensor(path):
    return from_bytes(Path(path).read_bytes())
