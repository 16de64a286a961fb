"""Dense tensors of rank 0-3 and the numeric kernels everything else composes.

Values are float64 by default (float32 available as a speed option). The
masking sentinel is the IEEE -inf: exp(-inf) == 0, so masked softmax entries
come out as exact zeros rather than small positives. -inf is only legal in
tensors built as masks or pre-softmax scores; NaN is never legal and is
rejected at construction.

All public operations are pure: inputs are never mutated. Every batched
matrix product runs through :func:`matmul_batched`, which counts dot
products into a module-level counter -- the single chokepoint the
complexity instrumentation reads, for every attention variant alike.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "DimensionError",
    "DegenerateRowError",
    "OpCounter",
    "op_counter",
    "reset_op_counter",
    "matmul_batched",
    "softmax_lastdim",
    "gather_rows_padded",
    "concat_axis0",
    "concat_lastdim",
    "affine",
    "leaky_relu",
    "add",
    "scale",
    "transpose_last2",
    "reshape",
    "EagerOps",
]


class DimensionError(ValueError):
    """Operand shapes do not fit the operation."""


class DegenerateRowError(ValueError):
    """A softmax row contained no finite entry and cannot be normalized."""


class Tensor:
    """Immutable-by-convention dense array of rank 0 to 3, row-major.

    Thin wrapper over a numpy array that enforces the no-NaN invariant and
    restricts -inf to explicitly flagged tensors (masks, pre-softmax
    scores). Operations never write through ``data``.
    """

    __slots__ = ("data",)

    def __init__(self, data, dtype=None, allow_neg_inf: bool = False):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(np.float64)
        if arr.ndim > 3:
            raise DimensionError(f"rank {arr.ndim} > 3 not supported (shape {arr.shape})")
        if np.isnan(arr).any():
            raise ValueError("NaN entries are not permitted in a Tensor")
        if np.isposinf(arr).any():
            raise ValueError("+inf entries are not permitted in a Tensor")
        if not allow_neg_inf and np.isneginf(arr).any():
            raise ValueError(
                "-inf entries are only permitted in mask / pre-softmax score tensors"
            )
        self.data = arr

    # Internal constructor for op results whose cleanliness is guaranteed
    # by the producing kernel; skips the O(size) scans.
    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = object.__new__(cls)
        t.data = arr
        return t

    @classmethod
    def zeros(cls, shape: Sequence[int], dtype=np.float64) -> "Tensor":
        return cls._wrap(np.zeros(tuple(shape), dtype=dtype))

    @classmethod
    def full(cls, shape: Sequence[int], value: float, dtype=np.float64) -> "Tensor":
        return cls(np.full(tuple(shape), value, dtype=dtype), allow_neg_inf=True)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def copy(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def tolist(self):
        return self.data.tolist()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"


@dataclass
class OpCounter:
    """Running total of vector dot products performed by matmul_batched."""

    dot_products: int = 0

    def reset(self) -> None:
        self.dot_products = 0


_COUNTER = OpCounter()


def op_counter() -> OpCounter:
    """The module-level chokepoint counter."""
    return _COUNTER


def reset_op_counter() -> None:
    _COUNTER.reset()


def _as_batched(t: Tensor) -> tuple[np.ndarray, bool]:
    """View a rank-2 tensor as batch size 1; report whether it was 2-D."""
    if t.ndim == 2:
        return t.data[np.newaxis], True
    if t.ndim == 3:
        return t.data, False
    raise DimensionError(f"matmul operand must be rank 2 or 3, got shape {t.shape}")


def matmul_batched(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product on the last two axes.

    Rank-2 operands are treated as batch size 1 (and the result is rank 2
    when both are). Counts s*p*r dot products into the module counter.
    """
    aa, a2d = _as_batched(a)
    bb, b2d = _as_batched(b)
    if aa.shape[0] != bb.shape[0]:
        raise DimensionError(f"batch extents disagree: {a.shape} vs {b.shape}")
    if aa.shape[2] != bb.shape[1]:
        raise DimensionError(f"inner extents disagree: {a.shape} vs {b.shape}")
    s, p, r = aa.shape[0], aa.shape[1], bb.shape[2]
    _COUNTER.dot_products += s * p * r
    out = np.matmul(aa, bb)
    if a2d and b2d:
        out = out[0]
    return Tensor._wrap(out)


def _softmax_lastdim_inplace(arr: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, overwriting ``arr`` (caller must own it).

    Row-max subtraction keeps exp in range; -inf inputs map to exact zeros.
    """
    rowmax = np.max(arr, axis=-1, keepdims=True)
    if np.isneginf(rowmax).any():
        raise DegenerateRowError("softmax row with no finite entry cannot be normalized")
    arr -= rowmax
    np.exp(arr, out=arr)
    arr /= np.sum(arr, axis=-1, keepdims=True)
    return arr


def softmax_lastdim(t: Tensor) -> Tensor:
    """Row-stochastic softmax over the last axis.

    Entries at -inf inputs are exactly 0; every row must contain at least
    one finite entry or :class:`DegenerateRowError` is raised.
    """
    return Tensor._wrap(_softmax_lastdim_inplace(np.array(t.data)))


def gather_rows_padded(m: Tensor, indices: Sequence[int], pad: float) -> Tensor:
    """Select rows of a rank-2 tensor; out-of-range indices yield pad rows.

    Negative or >= n indices are not errors -- they produce rows filled
    with ``pad``, which is what lets block decompositions reference
    positions before the start of a sequence.
    """
    if m.ndim != 2:
        raise DimensionError(f"gather source must be rank 2, got shape {m.shape}")
    idx = np.asarray(list(indices), dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError("indices must be a flat sequence")
    n, d = m.shape
    out = np.full((idx.shape[0], d), pad, dtype=m.dtype)
    valid = (idx >= 0) & (idx < n)
    out[valid] = m.data[idx[valid]]
    return Tensor._wrap(out)


def concat_axis0(blocks: Sequence[Tensor]) -> Tensor:
    """Stack rank-2 blocks along rows, preserving block order."""
    if not blocks:
        raise DimensionError("need at least one block to concatenate")
    width = blocks[0].shape[-1]
    for b in blocks:
        if b.ndim != 2:
            raise DimensionError(f"blocks must be rank 2, got shape {b.shape}")
        if b.shape[-1] != width:
            raise DimensionError(
                f"trailing extents disagree: {b.shape[-1]} vs {width}"
            )
    if len(blocks) == 1:
        return Tensor._wrap(blocks[0].data.copy())
    return Tensor._wrap(np.concatenate([b.data for b in blocks], axis=0))


def concat_lastdim(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate tensors along the last axis."""
    if not parts:
        raise DimensionError("need at least one part to concatenate")
    lead = parts[0].shape[:-1]
    for p in parts:
        if p.shape[:-1] != lead:
            raise DimensionError(f"leading extents disagree: {p.shape} vs {parts[0].shape}")
    return Tensor._wrap(np.concatenate([p.data for p in parts], axis=-1))


def _leaky(arr: np.ndarray, alpha: float) -> np.ndarray:
    return np.where(arr >= 0, arr, alpha * arr)


def affine(x: Tensor, w: Tensor, b: Tensor, alpha: float | None = None) -> Tensor:
    """``act(x @ w + b)`` with act = identity or leaky-ReLU of slope alpha."""
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise DimensionError(
            f"affine expects x rank 2, w rank 2, b rank 1; got {x.shape}, {w.shape}, {b.shape}"
        )
    if w.shape[1] != b.shape[0]:
        raise DimensionError(f"bias extent {b.shape[0]} != output width {w.shape[1]}")
    pre = matmul_batched(x, w).data + b.data
    if alpha is not None:
        pre = _leaky(pre, alpha)
    return Tensor._wrap(pre)


def leaky_relu(t: Tensor, alpha: float) -> Tensor:
    """x for x >= 0 else alpha*x, elementwise."""
    return Tensor._wrap(_leaky(t.data, alpha))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of same-shape tensors (masks may contribute -inf)."""
    if a.shape != b.shape:
        raise DimensionError(f"add shapes disagree: {a.shape} vs {b.shape}")
    return Tensor._wrap(a.data + b.data)


def scale(t: Tensor, c: float) -> Tensor:
    """Multiply by a finite scalar (-inf entries stay -inf for c > 0)."""
    if not np.isfinite(c):
        raise ValueError(f"scale factor must be finite, got {c}")
    return Tensor._wrap(t.data * c)


def transpose_last2(t: Tensor) -> Tensor:
    if t.ndim < 2:
        raise DimensionError(f"need rank >= 2 to transpose, got shape {t.shape}")
    return Tensor._wrap(np.swapaxes(t.data, -1, -2))


def reshape(t: Tensor, shape: Iterable[int]) -> Tensor:
    """Row-major reshape; element order is preserved."""
    shape = tuple(shape)
    if len(shape) > 3:
        raise DimensionError(f"rank {len(shape)} > 3 not supported")
    return Tensor._wrap(t.data.reshape(shape))


class EagerOps:
    """Executes the shared kernel vocabulary directly on tensors.

    ``autodiff.Graph`` implements the same method set; code written
    against this interface (the attention kernels, the forecaster) runs
    unchanged in plain or recorded mode.
    """

    def constant(self, t: Tensor) -> Tensor:
        return t

    def matmul_batched(self, a, b):
        return matmul_batched(a, b)

    def softmax_lastdim(self, t):
        return softmax_lastdim(t)

    def gather_rows_padded(self, m, indices, pad):
        return gather_rows_padded(m, indices, pad)

    def concat_axis0(self, blocks):
        return concat_axis0(blocks)

    def concat_lastdim(self, parts):
        return concat_lastdim(parts)

    def affine(self, x, w, b, alpha=None):
        return affine(x, w, b, alpha)

    def leaky_relu(self, t, alpha):
        return leaky_relu(t, alpha)

    def add(self, a, b):
        return add(a, b)

    def scale(self, t, c):
        return scale(t, c)

    def transpose_last2(self, t):
        return transpose_last2(t)

    def reshape(self, t, shape):
        return reshape(t, shape)

    def value(self, t: Tensor) -> Tensor:
        """The plain tensor behind a backend value (identity here)."""
        return t


EAGER = EagerOps()
