"""Named tensor container and the exact arithmetic the rest of the package uses.

A :class:`TensorMap` is an immutable, name-sorted mapping of 1-D / 2-D float
arrays. Checkpoints are float32; accumulators (the superposed delta) are
float64. Every reduction accumulates in float64 and walks tensors in
lexicographic name order, so results never depend on insertion order.
"""

from __future__ import annotations

import math
from collections.abc import Iterator, Mapping
from typing import Optional

import numpy as np

from .errors import DegenerateInputError, StructuralMismatchError

_ALLOWED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def _freeze(name: str, value, dtype) -> np.ndarray:
    arr = np.asarray(value)
    if dtype is None:
        dtype = arr.dtype if arr.dtype in _ALLOWED_DTYPES else np.float32
    arr = np.array(arr, dtype=dtype, order="C", copy=True)
    if arr.ndim not in (1, 2):
        raise StructuralMismatchError(
            f"tensor {name!r} has rank {arr.ndim}; only 1-D and 2-D tensors are supported"
        )
    if any(s <= 0 for s in arr.shape):
        raise StructuralMismatchError(f"tensor {name!r} has an empty dimension {arr.shape}")
    arr.setflags(write=False)
    return arr


class TensorMap(Mapping):
    """Ordered, read-only map ``name -> ndarray``.

    Iteration is always lexicographic by name. Arrays handed in are copied and
    marked read-only, so a TensorMap can be shared between threads freely.
    """

    __slots__ = ("_entries", "metadata")

    def __init__(
        self,
        entries: Optional[Mapping[str, object]] = None,
        metadata: Optional[Mapping[str, str]] = None,
        dtype=None,
    ):
        entries = entries or {}
        self._entries = {name: _freeze(name, entries[name], dtype) for name in sorted(entries)}
        self.metadata = dict(metadata or {})

    @classmethod
    def _wrap(cls, entries: dict, metadata=None) -> "TensorMap":
        # Internal fast path: arrays are already fresh, owned and well-formed.
        out = cls.__new__(cls)
        for arr in entries.values():
            arr.setflags(write=False)
        out._entries = {name: entries[name] for name in sorted(entries)}
        out.metadata = dict(metadata or {})
        return out

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        body = ", ".join(f"{k}:{tuple(v.shape)}" for k, v in self._entries.items())
        return f"TensorMap({body})"

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self._entries.items()}

    @property
    def num_params(self) -> int:
        return sum(v.size for v in self._entries.values())

    @property
    def nbytes(self) -> int:
        return sum(v.nbytes for v in self._entries.values())

    def astype(self, dtype) -> "TensorMap":
        return TensorMap._wrap(
            {k: v.astype(dtype, copy=True) for k, v in self._entries.items()}, self.metadata
        )

    def replace(self, updates: Mapping[str, np.ndarray]) -> "TensorMap":
        """Copy with some tensors swapped out (names must already exist)."""
        entries = dict(self._entries)
        for name, value in updates.items():
            if name not in entries:
                raise StructuralMismatchError(f"tensor {name!r} not present")
            if tuple(np.shape(value)) != entries[name].shape:
                raise StructuralMismatchError(
                    f"tensor {name!r}: shape {np.shape(value)} != {entries[name].shape}"
                )
            entries[name] = _freeze(name, value, entries[name].dtype)
        return TensorMap._wrap(entries, self.metadata)

    def subset(self, names) -> "TensorMap":
        return TensorMap._wrap({n: self._entries[n] for n in names}, self.metadata)


def zeros_like(x: TensorMap, dtype=None) -> TensorMap:
    return TensorMap._wrap(
        {k: np.zeros(v.shape, dtype=dtype or v.dtype) for k, v in x.items()}, x.metadata
    )


def check_structure(x: Mapping, y: Mapping) -> None:
    """Raise StructuralMismatchError naming the first tensor (in name order) that differs."""
    for name in sorted(set(x) | set(y)):
        if name not in x:
            raise StructuralMismatchError(f"tensor {name!r} missing from left operand")
        if name not in y:
            raise StructuralMismatchError(f"tensor {name!r} missing from right operand")
        if x[name].shape != y[name].shape:
            raise StructuralMismatchError(
                f"tensor {name!r}: shape {tuple(x[name].shape)} != {tuple(y[name].shape)}"
            )


def axpy(a: float, x: TensorMap, y: TensorMap) -> TensorMap:
    """Return ``a*x + y``. The result dtype follows numpy promotion of x and y."""
    check_structure(x, y)
    out = {}
    for name in x:
        xv, yv = x[name], y[name]
        dtype = np.result_type(xv, yv)
        out[name] = dtype.type(a) * xv.astype(dtype, copy=False) + yv.astype(dtype, copy=False)
    return TensorMap._wrap(out, y.metadata)


def sub(x: TensorMap, y: TensorMap) -> TensorMap:
    check_structure(x, y)
    return TensorMap._wrap({n: np.subtract(x[n], y[n]) for n in x}, x.metadata)


def add(x: TensorMap, y: TensorMap) -> TensorMap:
    check_structure(x, y)
    return TensorMap._wrap({n: np.add(x[n], y[n]) for n in x}, x.metadata)


def scale(a: float, x: TensorMap) -> TensorMap:
    return TensorMap._wrap({n: v.dtype.type(a) * v for n, v in x.items()}, x.metadata)


def inner(x: TensorMap, y: TensorMap) -> float:
    """Frobenius inner product: float64 per tensor, exactly rounded sum across tensors."""
    check_structure(x, y)
    return math.fsum(
        float(np.dot(x[n].ravel().astype(np.float64), y[n].ravel().astype(np.float64)))
        for n in sorted(x)
    )


def frobenius_norm(x: Mapping) -> float:
    # fsum makes the result independent of which name holds which tensor, so
    # permuting tensors between names leaves the norm bit-identical.
    partials = []
    for name in sorted(x):
        v = np.asarray(x[name], dtype=np.float64).ravel()
        partials.append(float(np.dot(v, v)))
    return math.sqrt(math.fsum(partials))


def cosine(x: TensorMap, y: TensorMap) -> float:
    nx, ny = frobenius_norm(x), frobenius_norm(y)
    if nx == 0.0 or ny == 0.0:
        raise DegenerateInputError("cosine undefined for a zero-norm operand")
    return max(-1.0, min(1.0, inner(x, y) / (nx * ny)))


def bit_equal(x: Mapping, y: Mapping) -> bool:
    """True when both maps hold the same names, shapes, dtypes and bytes."""
    if sorted(x) != sorted(y):
        return False
    for name in x:
        a, b = np.asarray(x[name]), np.asarray(y[name])
        if a.dtype != b.dtype or a.shape != b.shape or a.tobytes() != b.tobytes():
            return False
    return True


def max_abs(x: Mapping) -> float:
    return max((float(np.max(np.abs(v))) for v in x.values()), default=0.0)
