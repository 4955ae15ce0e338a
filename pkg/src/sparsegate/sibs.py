"""Static indicator-based sparsification.

For every neuron i, S(i) is the set of other neurons that were zero in every
profiling sample where i was zero.  A small set of indicator neurons is
chosen by greedy maximum coverage; at inference the indicators are computed
first and a zero indicator licenses skipping its whole implied set.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import binio
from .errors import DimensionError
from .model import BaseModel, FFBlock, ff_forward, forward_from, layer_inputs
from .numerics import DTYPE, MacCounter, column_pruned_matvec, masked_matvec, matvec, relu
from .profiler import ActivationTrace
from .toytrain import SynthDataset, quality

TABLE_MAGIC = b"MGSI"
TABLE_VERSION = 1


@dataclass
class ImplicationSets:
    """``implies[i, j]`` is true iff j is in S(i)."""

    implies: np.ndarray  # bool (f, f)
    support: np.ndarray  # int (f,), samples where neuron i is zero

    @property
    def f(self) -> int:
        return self.implies.shape[0]

    def s(self, i: int) -> frozenset:
        return frozenset(int(j) for j in np.flatnonzero(self.implies[i]))


def mine_implications(trace: ActivationTrace, chunk: int = 4096) -> ImplicationSets:
    """Exact implication sets from a trace; zero means exactly 0.0.

    Co-zero counts are accumulated over sample chunks, so the result does not
    depend on the chunking.  Neurons that are never zero get an empty set.
    """
    if trace.samples < 1:
        raise ValueError("cannot mine implications from an empty trace")
    f = trace.f
    co_zero = np.zeros((f, f), dtype=np.float64)
    for lo in range(0, trace.samples, chunk):
        z = (~trace.nonzero[lo:lo + chunk]).astype(np.float64)
        co_zero += z.T @ z
    support = np.rint(np.diag(co_zero)).astype(np.int64)
    implies = (co_zero == support[:, None].astype(np.float64)) & (support[:, None] > 0)
    np.fill_diagonal(implies, False)
    return ImplicationSets(implies, support)


@dataclass
class IndicatorTable:
    layer: int
    f: int
    indicators: list[int]
    implied: list[np.ndarray] = field(repr=False)

    def __post_init__(self):
        self.indicators = [int(i) for i in self.indicators]
        self.implied = [np.unique(np.asarray(s, dtype=np.int64)) for s in self.implied]
        if len(self.implied) != len(self.indicators):
            raise ValueError("one implied set per indicator is required")
        if len(set(self.indicators)) != len(self.indicators):
            raise ValueError("indicators must be distinct")
        for i, s in zip(self.indicators, self.implied):
            if not 0 <= i < self.f or (s.size and (s.min() < 0 or s.max() >= self.f)):
                raise ValueError(f"indicator {i} or its implied set is outside [0, {self.f})")

    @property
    def covered(self) -> np.ndarray:
        cov = np.zeros(self.f, dtype=bool)
        for s in self.implied:
            cov[s] = True
        return cov

    @property
    def covered_count(self) -> int:
        return int(self.covered.sum())

    @property
    def amplification(self) -> float:
        return self.covered_count / len(self.indicators) if self.indicators else 0.0

    def membership(self) -> np.ndarray:
        """Bool ``(len(indicators), f)`` matrix of the implied sets."""
        m = np.zeros((len(self.indicators), self.f), dtype=bool)
        for k, s in enumerate(self.implied):
            m[k, s] = True
        return m


def greedy_cover(imp: ImplicationSets, budget: int, layer: int = 0) -> IndicatorTable:
    """Greedy maximum coverage: add the neuron with the largest marginal gain
    (lowest index on ties) until the budget is spent or nothing is gained."""
    if not 1 <= budget <= imp.f:
        raise ValueError(f"budget must be in [1, {imp.f}], got {budget}")
    covered = np.zeros(imp.f, dtype=bool)
    chosen = np.zeros(imp.f, dtype=bool)
    indicators = []
    for _ in range(budget):
        gains = (imp.implies & ~covered).sum(axis=1)
        gains[chosen] = -1
        best = int(np.argmax(gains))
        if gains[best] <= 0:
            break
        indicators.append(best)
        chosen[best] = True
        covered |= imp.implies[best]
    return IndicatorTable(layer, imp.f, indicators, [np.flatnonzero(imp.implies[i]) for i in indicators])


def save_table(table: IndicatorTable, path) -> None:
    chunks = [TABLE_MAGIC, binio.u32(TABLE_VERSION), binio.u32(table.layer),
              binio.u32(table.f), binio.u32(len(table.indicators))]
    for i, s in zip(table.indicators, table.implied):
        chunks += [binio.u32(i), binio.u32(s.size), binio.u32s(s)]
    binio.write_file(path, chunks)


def load_table(path) -> IndicatorTable:
    r = binio.read_file(path)
    r.header(TABLE_MAGIC, TABLE_VERSION)
    layer, f, count = r.u32(), r.u32(), r.u32()
    indicators, implied = [], []
    for _ in range(count):
        indicators.append(r.u32())
        implied.append(r.u32s(r.u32()))
    return IndicatorTable(layer, f, indicators, implied)


@dataclass
class SibsCounters:
    indicator: MacCounter = field(default_factory=MacCounter)
    layer1: MacCounter = field(default_factory=MacCounter)
    layer2: MacCounter = field(default_factory=MacCounter)


def sibs_block(block: FFBlock, table: IndicatorTable, x, counters: SibsCounters | None = None):
    """Two-phase SIBS block forward on a batch.

    Returns ``(hidden, out, skipped)`` where ``skipped`` is a bool
    ``(n, f)`` mask of neurons that were never computed.
    """
    if table.f != block.f:
        raise DimensionError(f"table for f={table.f} does not match block f={block.f}")
    x = np.atleast_2d(np.asarray(x, dtype=DTYPE))
    if x.shape[1] != block.d:
        raise DimensionError(f"input width {x.shape[1]} != block width {block.d}")
    counters = counters or SibsCounters()
    n, f = x.shape[0], block.f
    ind = np.asarray(table.indicators, dtype=np.int64)
    is_ind = np.zeros(f, dtype=bool)
    is_ind[ind] = True

    hidden = np.zeros((n, f), dtype=DTYPE)
    skipped = np.zeros((n, f), dtype=bool)
    if ind.size:
        h_ind = relu(matvec(block.w1[ind], x, counters.indicator) + block.b1[ind])
        hidden[:, ind] = h_ind
        zero_ind = (h_ind == 0).astype(np.float32)
        skipped = (zero_ind @ table.membership().astype(np.float32)) > 0
        skipped &= ~is_ind
    else:
        counters.indicator.add(np.zeros(n, dtype=np.int64))

    rest = ~skipped & ~is_ind
    pre = masked_matvec(block.w1, x, rest, counters.layer1) + block.b1
    hidden = np.where(rest, relu(pre), hidden)
    out = column_pruned_matvec(block.w2, hidden, ~skipped, counters.layer2) + block.b2
    return hidden, out, skipped


def sibs_forward(block: FFBlock, table: IndicatorTable, x):
    """Single-block SIBS forward. Returns ``(out, skipped_count)``."""
    x = np.asarray(x, dtype=DTYPE)
    _, out, skipped = sibs_block(block, table, x)
    counts = skipped.sum(axis=1)
    if x.ndim == 1:
        return out[0], int(counts[0])
    return out, counts


@dataclass
class SibsLayerStats:
    indicators: int
    skipped: np.ndarray  # per-sample skipped neurons
    violations: np.ndarray  # per-sample skipped neurons that were nonzero under dense
    counters: SibsCounters


def sibs_model_forward(model: BaseModel, tables: dict, x):
    """Residual forward with SIBS on the layers present in ``tables``."""
    x = np.asarray(x, dtype=DTYPE)
    stats = {}
    for i, blk in enumerate(model.layers):
        table = tables.get(i)
        if table is None:
            x = x + ff_forward(blk, x)[1]
            continue
        counters = SibsCounters()
        dense_h = ff_forward(blk, x)[0]
        _, out, skipped = sibs_block(blk, table, x, counters)
        stats[i] = SibsLayerStats(len(table.indicators), skipped.sum(axis=1),
                                  (skipped & (dense_h != 0)).sum(axis=1), counters)
        x = x + out
    return x, stats


@dataclass
class SibsEvalRow:
    layer: int
    budget: int
    indicators: int
    covered: int
    amplification: float
    covered_fraction: float
    skip_rate: float
    violation_rate: float
    quality: float
    flops_reduction: float


def evaluate_sibs(model: BaseModel, table: IndicatorTable, data: SynthDataset, budget: int,
                  inputs: list | None = None) -> SibsEvalRow:
    """Gate only ``table.layer`` with SIBS and measure it on ``data``.

    ``inputs`` may carry precomputed ``layer_inputs(model, data.x)``.
    """
    layer = table.layer
    if not 0 <= layer < model.layer_count:
        raise DimensionError(f"table layer {layer} out of range")
    x = (inputs or layer_inputs(model, data.x))[layer]
    blk = model.layers[layer]
    counters = SibsCounters()
    _, out, skipped = sibs_block(blk, table, x, counters)
    violations = int((skipped & (ff_forward(blk, x)[0] != 0)).sum())
    final = forward_from(model, x + out, layer + 1)
    f, d = model.f, model.d
    total_skipped = int(skipped.sum())
    dense = 2 * d * f * data.n
    method = sum(c.total for c in (counters.indicator, counters.layer1, counters.layer2))
    return SibsEvalRow(
        layer=layer,
        budget=budget,
        indicators=len(table.indicators),
        covered=table.covered_count,
        amplification=table.amplification,
        covered_fraction=table.covered_count / f,
        skip_rate=total_skipped / (f * data.n),
        violation_rate=violations / total_skipped if total_skipped else 0.0,
        quality=quality(final, data.y),
        flops_reduction=1.0 - method / dense,
    )
