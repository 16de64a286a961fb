"""Banded causal attention in Θ(n*window) via block decomposition.

Each query row i attends to the ``window`` positions i-window+1 .. i. The
quadratic reference (:func:`localattn.attention.masked_full_attention_oracle`)
materializes all n^2 scores and masks most of them away; here the rows are
cut into s = floor(n / window) query blocks of ``window`` rows, each paired
with the (2*window - 1) key rows its band can reach, so only
s * window * (2*window - 1) scores ever exist. Row indexing between the
flat and blocked layouts:

    block r = i // window, offset i1 = i mod window
    key column j lands in block r at slot j1 = j - (r-1)*window - 1

Block 0's key slab starts before the sequence; those rows are zero-filled
and the block mask shuts them off (without that guard the zero rows would
win softmax weight, which is the seeded fault used by the masking tests).
Rows past s*window (when window does not divide n) run through one direct
masked slab against the last window-1+remainder keys.

All heavy math goes through the ``ops`` backend, so the same kernel runs
eagerly or on the autodiff tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import EAGER, DimensionError, Tensor, op_counter

__all__ = [
    "LamCounters",
    "BlockedAttn",
    "index_map",
    "key_block_offset",
    "split_queries",
    "split_keys",
    "split_values",
    "local_mask",
    "build_blocked",
    "lam_forward",
    "default_window",
]


@dataclass
class LamCounters:
    """Work and memory instrumentation for one or more attention forwards.

    ``dot_products`` accumulates score-stage products (query-key dots
    only, so the count is comparable across mechanisms).
    ``peak_score_elements`` is the largest number of score-matrix elements
    alive at once, tracked by alloc/free lifetime hooks.
    """

    dot_products: int = 0
    peak_score_elements: int = 0
    _live: int = field(default=0, repr=False)

    def score_alloc(self, count: int) -> None:
        self._live += count
        if self._live > self.peak_score_elements:
            self.peak_score_elements = self._live

    def score_free(self, count: int) -> None:
        self._live = max(0, self._live - count)

    def reset(self) -> None:
        self.dot_products = 0
        self.peak_score_elements = 0
        self._live = 0


def index_map(i: int, window: int) -> tuple[int, int]:
    """Flat row i -> (block, offset): i = block*window + offset."""
    if i < 0:
        raise ValueError(f"row index must be >= 0, got {i}")
    return i // window, i % window


def key_block_offset(j: int, block: int, window: int) -> int:
    """Flat key column j -> slot within block's key slab (0 .. 2*window-2)."""
    return j - (block - 1) * window - 1


def _check_window(n: int, window: int) -> None:
    if not 1 <= window <= n:
        raise ValueError(f"window must be in [1, {n}], got {window}")


def _key_slab_indices(s: int, window: int) -> list[int]:
    """Source rows for every block's key slab, block-major; may go negative."""
    return [
        (r - 1) * window + 1 + j1
        for r in range(s)
        for j1 in range(2 * window - 1)
    ]


def _split_queries(ops, q, n: int, window: int):
    s = n // window
    flat = ops.gather_rows_padded(q, range(s * window), 0.0)
    return ops.reshape(flat, (s, window, _width(ops, q)))


def _width(ops, x) -> int:
    return ops.value(x).shape[-1]


def _split_slab(ops, m, n: int, window: int):
    s = n // window
    flat = ops.gather_rows_padded(m, _key_slab_indices(s, window), 0.0)
    return ops.reshape(flat, (s, 2 * window - 1, _width(ops, m)))


def split_queries(q: Tensor, window: int) -> Tensor:
    """Rows 0 .. s*window-1 of q as an s x window x d_q block tensor."""
    _check_window(q.shape[0], window)
    return _split_queries(EAGER, q, q.shape[0], window)


def split_keys(k: Tensor, window: int) -> Tensor:
    """Per block r, key rows (r-1)*window+1 .. (r+1)*window-1, zero-padded.

    Only block 0 reaches before the sequence start; its first window-1
    rows are zero-filled and must stay masked.
    """
    _check_window(k.shape[0], window)
    return _split_slab(EAGER, k, k.shape[0], window)


def split_values(v: Tensor, window: int) -> Tensor:
    """Value rows blocked exactly like :func:`split_keys` (zero padding)."""
    _check_window(v.shape[0], window)
    return _split_slab(EAGER, v, v.shape[0], window)


def local_mask(s: int, window: int, pad_guard: bool = True) -> Tensor:
    """Additive mask per block: zero inside the band, -inf outside.

    Entry [r, i1, j1] is zero iff i1 <= j1 <= i1+window-1 (the band in
    slab coordinates) and, for block 0, j1 >= window-1 so the zero-padded
    key rows stay unreachable. ``pad_guard=False`` drops that second
    condition; it exists only to demonstrate the failure it causes.
    """
    if s < 1 or window < 1:
        raise ValueError(f"need s >= 1 and window >= 1, got s={s}, window={window}")
    width = 2 * window - 1
    i1 = np.arange(window)[:, np.newaxis]
    j1 = np.arange(width)[np.newaxis, :]
    band = (i1 <= j1) & (j1 <= i1 + window - 1)
    out = np.where(band, 0.0, -np.inf)[np.newaxis].repeat(s, axis=0)
    if pad_guard:
        out[0] = np.where(band & (j1 >= window - 1), 0.0, -np.inf)
    return Tensor._wrap(out)


@dataclass(frozen=True)
class BlockedAttn:
    """The block decomposition of one (q, k, v, window) problem.

    ``q_blocks`` is s x window x d_q; ``k_blocks`` / ``v_blocks`` are
    s x (2*window-1) x d; ``mask`` is s x window x (2*window-1);
    ``remainder_rows`` counts trailing rows (< window) the blocks skip.
    """

    num_blocks: int
    window: int
    q_blocks: Tensor
    k_blocks: Tensor
    v_blocks: Tensor
    mask: Tensor
    remainder_rows: int


def build_blocked(q: Tensor, k: Tensor, v: Tensor, window: int) -> BlockedAttn:
    """Materialize the decomposition (eager, mainly for inspection/tests)."""
    n = q.shape[0]
    _check_window(n, window)
    s = n // window
    return BlockedAttn(
        num_blocks=s,
        window=window,
        q_blocks=split_queries(q, window),
        k_blocks=split_keys(k, window),
        v_blocks=split_values(v, window),
        mask=local_mask(s, window),
        remainder_rows=n - s * window,
    )


def _remainder_mask(rem: int, window: int) -> Tensor:
    """Band mask for the trailing rows against their key slab.

    Slab column c maps to source row s*window - window + 1 + c; row t
    (source row s*window + t) keeps c in [t, t + window - 1].
    """
    t = np.arange(rem)[:, np.newaxis]
    c = np.arange(rem + window - 1)[np.newaxis, :]
    keep = (t <= c) & (c <= t + window - 1)
    return Tensor._wrap(np.where(keep, 0.0, -np.inf))


def _lam_attention(ops, q, k, v, window: int, counters: LamCounters | None = None,
                   pad_guard: bool = True):
    """Backend-generic banded attention; see module docstring for layout."""
    n, d_q = ops.value(q).shape
    _check_window(n, window)
    d_v = _width(ops, v)
    s = n // window
    rem = n - s * window
    inv_scale = 1.0 / math.sqrt(d_q)

    q_blocks = _split_queries(ops, q, n, window)
    k_blocks = _split_slab(ops, k, n, window)
    v_blocks = _split_slab(ops, v, n, window)
    mask = ops.constant(local_mask(s, window, pad_guard))

    slab_elements = s * window * (2 * window - 1)
    before = op_counter().dot_products
    scores = ops.matmul_batched(q_blocks, ops.transpose_last2(k_blocks))
    if counters is not None:
        counters.dot_products += op_counter().dot_products - before
        counters.score_alloc(slab_elements)
    weights = ops.softmax_lastdim(ops.scale(ops.add(scores, mask), inv_scale))
    blocked = ops.matmul_batched(weights, v_blocks)
    if counters is not None:
        counters.score_free(slab_elements)
    main = ops.reshape(blocked, (s * window, d_v))
    if rem == 0:
        return main

    # trailing rows: one direct masked slab, no padding (s >= 1 here)
    base = s * window - window + 1
    q_rem = ops.gather_rows_padded(q, range(s * window, n), 0.0)
    k_slab = ops.gather_rows_padded(k, range(base, n), 0.0)
    v_slab = ops.gather_rows_padded(v, range(base, n), 0.0)
    rem_mask = ops.constant(_remainder_mask(rem, window))
    rem_elements = rem * (rem + window - 1)
    before = op_counter().dot_products
    rem_scores = ops.matmul_batched(q_rem, ops.transpose_last2(k_slab))
    if counters is not None:
        counters.dot_products += op_counter().dot_products - before
        counters.score_alloc(rem_elements)
    rem_weights = ops.softmax_lastdim(ops.scale(ops.add(rem_scores, rem_mask), inv_scale))
    rem_out = ops.matmul_batched(rem_weights, v_slab)
    if counters is not None:
        counters.score_free(rem_elements)
    return ops.concat_axis0([main, rem_out])


def lam_forward(q: Tensor, k: Tensor, v: Tensor, window: int,
                counters: LamCounters | None = None, pad_guard: bool = True) -> Tensor:
    """Banded attention over the trailing window, computed blockwise.

    Equals the quadratic masked oracle to 64-bit tolerance while touching
    Θ(n*window) scores. ``counters`` collects dot products and peak score
    elements; ``pad_guard=False`` disables block 0's padding mask (a
    deliberate fault switch for negative tests).
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError(
            f"q, k, v must be rank 2, got {q.shape}, {k.shape}, {v.shape}"
        )
    if k.shape != q.shape:
        raise DimensionError(f"k shape {k.shape} != q shape {q.shape}")
    if v.shape[0] != q.shape[0]:
        raise DimensionError(f"v has {v.shape[0]} rows, expected {q.shape[0]}")
    return _lam_attention(EAGER, q, k, v, window, counters, pad_guard)


def default_window(n: int, rule: str = "4ceil", base: float = 2.0) -> int:
    """Window width as a function of sequence length: 4 log n, rounded.

    ``rule`` picks the rounding arrangement: "4ceil" gives
    4*ceil(log(n)), "ceil4" gives ceil(4*log(n)). Both are clamped to
    [1, n]; the logarithm base defaults to 2.
    """
    if n < 1:
        raise ValueError(f"sequence length must be >= 1, got {n}")
    if n == 1:
        return 1
    lg = math.log(n, base)
    if rule == "4ceil":
        w = 4 * math.ceil(lg)
    elif rule == "ceil4":
        w = math.ceil(4 * lg)
    else:
        raise ValueError(f"unknown rule {rule!r}; expected '4ceil' or 'ceil4'")
    return min(n, max(1, w))
