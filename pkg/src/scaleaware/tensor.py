"""Dense (n, c, h, w) float64 tensors, a seeded RNG and binary serialization.

Tensors are plain C-contiguous ``numpy.ndarray`` objects of dtype float64 and
rank 4. The helpers here validate shapes strictly: there is no broadcasting,
and every function returns a fresh array without touching its inputs.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Iterable

import numpy as np

DTYPE = np.float64
_HEADER = struct.Struct("<4Q")
_MAX_ELEMENTS = 2**62


class ShapeError(ValueError):
    """Raised for malformed shapes or mismatched operands."""


def check_shape(shape: Iterable[int]) -> tuple[int, int, int, int]:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4:
        raise ShapeError(f"expected a 4-d shape, got {shape}")
    if any(s < 1 for s in shape):
        raise ShapeError(f"shape components must be >= 1, got {shape}")
    total = 1
    for s in shape:
        total *= s
    if total > _MAX_ELEMENTS:
        raise ShapeError(f"shape {shape} overflows the element count")
    return shape  # type: ignore[return-value]


def as_tensor(x) -> np.ndarray:
    """Return ``x`` as a contiguous float64 4-d array (copying if needed)."""
    arr = np.ascontiguousarray(x, dtype=DTYPE)
    check_shape(arr.shape)
    return arr


def zeros(shape) -> np.ndarray:
    return np.zeros(check_shape(shape), dtype=DTYPE)


def fill(shape, value: float) -> np.ndarray:
    return np.full(check_shape(shape), float(value), dtype=DTYPE)


class Rng:
    """Seeded random source; same seed and call order give the same stream.

    Backed by numpy's PCG64 bit generator, whose output is platform
    independent. ``state`` / ``set_state`` allow checkpointing.
    """

    def __init__(self, seed: int = 0):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, mean: float, std: float, size) -> np.ndarray:
        return self._gen.normal(mean, std, size)

    def uniform(self, low: float, high: float, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def state(self) -> dict:
        return self._gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state


def randn(shape, mean: float, std: float, rng: Rng) -> np.ndarray:
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    shape = check_shape(shape)
    if std == 0:
        return fill(shape, mean)
    return np.ascontiguousarray(rng.normal(mean, std, shape), dtype=DTYPE)


def _same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def add(a, b) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    _same(a, b)
    return a + b


def sub(a, b) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    _same(a, b)
    return a - b


def mul(a, b) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    _same(a, b)
    return a * b


def add_scalar(a, s: float) -> np.ndarray:
    return as_tensor(a) + float(s)


def mul_scalar(a, s: float) -> np.ndarray:
    return as_tensor(a) * float(s)


def write_tensor(f: BinaryIO, x: np.ndarray) -> None:
    """Write little-endian header (4 x uint64 dims) then raw float64 payload."""
    x = as_tensor(x)
    f.write(_HEADER.pack(*x.shape))
    f.write(x.astype("<f8", copy=False).tobytes(order="C"))


def read_tensor(f: BinaryIO) -> np.ndarray:
    raw = f.read(_HEADER.size)
    if len(raw) != _HEADER.size:
        raise EOFError("truncated tensor header")
    shape = check_shape(_HEADER.unpack(raw))
    count = int(np.prod(shape))
    payload = f.read(8 * count)
    if len(payload) != 8 * count:
        raise EOFError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f8").astype(DTYPE).reshape(shape)


def save_tensor(path, x: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor(f, x)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)
