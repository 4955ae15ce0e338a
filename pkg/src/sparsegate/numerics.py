"""Dense float32 kernels with a fixed accumulation order, plus seeded RNG.

Every dot product is accumulated sequentially in ascending column order,
one rounded multiply and one rounded add per term.  Work is vectorised only
across independent output rows and samples, so a row computed alone, inside
a masked subset, or inside the full matrix always has the same bits.

Inputs may be a single vector ``(cols,)`` or a batch ``(n, cols)``; masks
follow the same convention (shared ``(k,)`` or per-sample ``(n, k)``).
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError

DTYPE = np.float32
SIGMOID_EPS = 1e-7
# Caps the temporary gather buffers of masked_matvec (elements per chunk).
_GATHER_CHUNK = 1 << 16


class Rng:
    """Seeded generator backed by numpy's PCG64 bit generator.

    PCG64 is a fully specified 128-bit-state permuted congruential generator,
    so a given seed reproduces the same stream on every platform.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, size, scale: float = 1.0) -> np.ndarray:
        return (self._gen.standard_normal(size) * scale).astype(DTYPE)

    def uniform(self, size, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def bernoulli(self, p: float, size) -> np.ndarray:
        return self._gen.random(size) < p

    def spawn(self, offset: int) -> "Rng":
        """Independent child stream, derived deterministically from the seed."""
        return Rng(np.random.SeedSequence([self.seed, offset]).generate_state(1, np.uint64)[0])


@dataclass
class MacCounter:
    """Counts multiply-accumulates actually executed by the kernels.

    ``per_sample`` is allocated lazily on the first batched call and holds
    per-sample counts in dataset order.
    """

    total: int = 0
    per_sample: np.ndarray | None = field(default=None, repr=False)

    def add(self, counts: np.ndarray) -> None:
        counts = np.asarray(counts, dtype=np.int64)
        self.total += int(counts.sum())
        if self.per_sample is None:
            self.per_sample = np.zeros(counts.shape[0], dtype=np.int64)
        self.per_sample += counts


def as_matrix(a) -> np.ndarray:
    m = np.ascontiguousarray(a, dtype=DTYPE)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def _batch(x, cols: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=DTYPE)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != cols:
        raise DimensionError(f"input of shape {x.shape} does not match {cols} columns")
    return xb, single


def _mask(mask, n: int, k: int, what: str) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        if mask.shape[0] != k:
            raise DimensionError(f"{what} mask has length {mask.shape[0]}, expected {k}")
        return mask
    if mask.shape != (n, k):
        raise DimensionError(f"{what} mask has shape {mask.shape}, expected ({n}, {k})")
    return mask


def matvec(m, x, counter: MacCounter | None = None) -> np.ndarray:
    m = as_matrix(m)
    rows, cols = m.shape
    xb, single = _batch(x, cols)
    mt = np.ascontiguousarray(m.T)
    out = np.zeros((xb.shape[0], rows), dtype=DTYPE)
    tmp = np.empty_like(out)
    for j in range(cols):
        np.multiply(xb[:, j, None], mt[j], out=tmp)
        out += tmp
    if counter is not None:
        counter.add(np.full(xb.shape[0], rows * cols))
    return out[0] if single else out


def masked_matvec(m, x, row_mask, counter: MacCounter | None = None) -> np.ndarray:
    """Rows with a false mask entry are exactly 0.0 and cost no MACs."""
    m = as_matrix(m)
    rows, cols = m.shape
    xb, single = _batch(x, cols)
    n = xb.shape[0]
    mask = _mask(row_mask, n, rows, "row")
    if mask.ndim == 1:
        mask = np.broadcast_to(mask, (n, rows))
    s_idx, r_idx = np.nonzero(mask)
    out = np.zeros((n, rows), dtype=DTYPE)
    if s_idx.size:
        mt = np.ascontiguousarray(m.T)
        xt = np.ascontiguousarray(xb.T)
        step = max(1, _GATHER_CHUNK // max(cols, 1))
        for lo in range(0, s_idx.size, step):
            s, r = s_idx[lo:lo + step], r_idx[lo:lo + step]
            wg = mt[:, r]
            xg = xt[:, s]
            acc = np.zeros(s.size, dtype=DTYPE)
            for j in range(cols):
                acc += wg[j] * xg[j]
            out[s, r] = acc
    if counter is not None:
        counter.add(np.bincount(s_idx, minlength=n) * cols)
    return out[0] if single else out


def column_pruned_matvec(m, x, col_mask, counter: MacCounter | None = None) -> np.ndarray:
    """Sum only over columns whose mask entry is true (ascending order)."""
    m = as_matrix(m)
    rows, cols = m.shape
    xb, single = _batch(x, cols)
    n = xb.shape[0]
    mask = _mask(col_mask, n, cols, "column")
    mt = np.ascontiguousarray(m.T)
    out = np.zeros((n, rows), dtype=DTYPE)
    per_sample = np.zeros(n, dtype=np.int64)
    if mask.ndim == 1:
        for j in np.flatnonzero(mask):
            out += xb[:, j, None] * mt[j]
        per_sample += int(mask.sum()) * rows
    else:
        for j in range(cols):
            idx = np.flatnonzero(mask[:, j])
            if idx.size == n:
                out += xb[:, j, None] * mt[j]
            elif idx.size:
                out[idx] += xb[idx, j, None] * mt[j]
            per_sample[idx] += rows
    if counter is not None:
        counter.add(per_sample)
    return out[0] if single else out


def relu(x) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    # np.where keeps zeros as +0.0 regardless of the sign of the input zero.
    return np.where(x > 0, x, DTYPE(0)).astype(DTYPE)


def sigmoid(x) -> np.ndarray:
    """Logistic function clamped to [1e-7, 1 - 1e-7], evaluated in float64."""
    z = np.asarray(x, dtype=np.float64)
    with np.errstate(over="ignore"):  # exp overflow -> inf -> 0, the right limit
        s = 1.0 / (1.0 + np.exp(-z))
    return np.clip(s.astype(DTYPE), DTYPE(SIGMOID_EPS), DTYPE(1.0 - SIGMOID_EPS))


def map_sample_chunks(fn, n: int, threads: int = 1, chunk: int = 256) -> list:
    """Apply ``fn(lo, hi)`` over contiguous sample ranges, results in order.

    Only valid for per-sample work; the kernels above never mix samples, so
    the result is independent of the thread count.
    """
    bounds = [(lo, min(lo + chunk, n)) for lo in range(0, n, chunk)]
    if threads <= 1 or len(bounds) <= 1:
        return [fn(lo, hi) for lo, hi in bounds]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda b: fn(*b), bounds))
