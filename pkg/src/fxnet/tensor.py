"""Array policy shared by every module.

Tensors are plain row-major (C-order) numpy arrays.  This module pins the
scalar precision, validates shapes for the handful of primitives the rest of
the package builds on, and provides the seeded random stream.

Precision defaults to float32.  Gradient checks switch the whole stack to
float64 with :func:`precision`::

    with precision(np.float64):
        model = build(spec, RngStream(0))
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

_dtype: type = np.float32


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def get_dtype() -> type:
    return _dtype


def set_dtype(dtype) -> None:
    global _dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype!r}; use float32 or float64")
    _dtype = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    previous = _dtype
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(previous)


def tensor(values, dtype=None) -> np.ndarray:
    """Contiguous array in the active precision."""
    return np.ascontiguousarray(values, dtype=dtype or _dtype)


def zeros(shape: Sequence[int], dtype=None) -> np.ndarray:
    return np.zeros(tuple(shape), dtype=dtype or _dtype)


def check_finite(t: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(t)):
        bad = int(np.size(t) - np.count_nonzero(np.isfinite(t)))
        raise NonFiniteError(f"{what}: {bad} non-finite value(s)")
    return t


def _same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return check_finite(a @ b, "matmul")


def map_elementwise(t: np.ndarray, f: Callable) -> np.ndarray:
    out = np.vectorize(f, otypes=[np.asarray(t).dtype])(t) if np.size(t) else np.array(t, copy=True)
    return check_finite(out, "map")


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b, "add")
    return check_finite(a + b, "add")


def sub(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b, "sub")
    return check_finite(a - b, "sub")


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b, "mul")
    return check_finite(a * b, "mul")


def negate(a: np.ndarray) -> np.ndarray:
    return -a


def reduce_sum(t: np.ndarray, axis: int | None = None) -> np.ndarray:
    return check_finite(np.sum(t, axis=axis), "reduce_sum")


def reduce_max(t: np.ndarray, axis: int | None = None) -> np.ndarray:
    return check_finite(np.max(t, axis=axis), "reduce_max")


def ravel_index(index: Sequence[int], shape: Sequence[int]) -> int:
    """Row-major linear offset of a multi-index."""
    flat = 0
    for i, n in zip(index, shape, strict=True):
        if not 0 <= i < n:
            raise IndexError(f"index {tuple(index)} out of range for shape {tuple(shape)}")
        flat = flat * n + i
    return flat


def unravel_index(flat: int, shape: Sequence[int]) -> tuple[int, ...]:
    if not 0 <= flat < int(np.prod(shape)):
        raise IndexError(f"offset {flat} out of range for shape {tuple(shape)}")
    out = []
    for n in reversed(shape):
        flat, i = divmod(flat, n)
        out.append(i)
    return tuple(reversed(out))


class RngStream:
    """Seeded random stream.

    Backed by numpy's PCG64 bit generator seeded through ``SeedSequence``;
    the same seed reproduces the same draws for a given numpy release.
    Child streams come from ``spawn(key)``, which hashes ``(seed, key)``
    into a fresh seed sequence, so derived streams do not depend on how
    many draws the parent has made.
    """

    def __init__(self, seed: int):
        if not 0 <= int(seed) < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")
        self.seed = int(seed)
        self._entropy: tuple[int, ...] = (self.seed,)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self._entropy)))

    @classmethod
    def _derived(cls, entropy: tuple[int, ...]) -> "RngStream":
        stream = cls.__new__(cls)
        stream.seed = entropy[0]
        stream._entropy = entropy
        stream._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
        return stream

    def spawn(self, key: int) -> "RngStream":
        return RngStream._derived(self._entropy + (int(key),))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def random(self, size=None):
        return self._gen.random(size)
