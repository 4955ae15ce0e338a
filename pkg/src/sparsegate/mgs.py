"""Micro-gated sparsification.

A gate ``sigmoid(wg @ x + bg)`` with one output per contiguous group of
hidden neurons is trained with BCE to predict whether the group has any
nonzero activation.  Groups whose score falls below the threshold are
neither computed in the first layer nor read by the second.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import binio
from .errors import ConfigError, DimensionError, TrainingDivergedError
from .model import BaseModel, FFBlock, ff_forward, layer_inputs, model_forward
from .numerics import (DTYPE, SIGMOID_EPS, MacCounter, Rng, column_pruned_matvec, masked_matvec,
                       matvec, relu, sigmoid)
from .profiler import ActivationTrace
from .toytrain import SynthDataset, quality

log = logging.getLogger(__name__)

GATE_MAGIC = b"MGSG"
GATE_VERSION = 1
DEFAULT_GATE_RATIO = 0.125
THRESHOLD_GRID = (0.0, 0.1, 0.25, 0.5)


def gate_width(f: int, gate_ratio: float = DEFAULT_GATE_RATIO) -> int:
    g = math.ceil(gate_ratio * f)
    if g < 1 or f % g:
        raise DimensionError(f"gate width {g} (ratio {gate_ratio}) does not divide f={f}")
    return g


@dataclass
class MicroGate:
    layer: int
    wg: np.ndarray  # (g, d)
    bg: np.ndarray  # (g,)
    f: int
    threshold: float = 0.5

    def __post_init__(self):
        self.wg = np.ascontiguousarray(self.wg, dtype=DTYPE)
        self.bg = np.ascontiguousarray(self.bg, dtype=DTYPE)
        self.threshold = DTYPE(self.threshold)
        if self.wg.ndim != 2 or self.bg.shape != (self.wg.shape[0],):
            raise DimensionError(f"gate shapes wg={self.wg.shape} bg={self.bg.shape} disagree")
        if self.f % self.g:
            raise DimensionError(f"f={self.f} is not divisible by gate width {self.g}")

    @property
    def g(self) -> int:
        return self.wg.shape[0]

    @property
    def d(self) -> int:
        return self.wg.shape[1]

    @property
    def group_size(self) -> int:
        return self.f // self.g

    def with_threshold(self, threshold: float) -> "MicroGate":
        return MicroGate(self.layer, self.wg, self.bg, self.f, threshold)

    def check_block(self, block: FFBlock) -> None:
        if block.d != self.d or block.f != self.f:
            raise DimensionError(
                f"gate for d={self.d}, f={self.f} does not match block d={block.d}, f={block.f}"
            )


def save_gate(gate: MicroGate, path) -> None:
    binio.write_file(path, [
        GATE_MAGIC, binio.u32(GATE_VERSION), binio.u32(gate.layer), binio.u32(gate.d),
        binio.u32(gate.f), binio.u32(gate.g), binio.f32(gate.threshold),
        binio.floats(gate.wg), binio.floats(gate.bg),
    ])


def load_gate(path) -> MicroGate:
    r = binio.read_file(path)
    r.header(GATE_MAGIC, GATE_VERSION)
    layer, d, f, g = r.u32(), r.u32(), r.u32(), r.u32()
    threshold = r.f32()
    wg = r.floats(g, d)
    bg = r.floats(g)
    return MicroGate(layer, wg, bg, f, threshold)


def group_activity(nonzero_or_values: np.ndarray, group_size: int) -> np.ndarray:
    """Per-group label: Euclidean norm of the group's activations > 0."""
    a = np.asarray(nonzero_or_values)
    n, f = a.shape
    if group_size <= 0 or f % group_size:
        raise DimensionError(f"f={f} is not divisible by group size {group_size}")
    grouped = a.reshape(n, f // group_size, group_size).astype(np.float64)
    return np.sqrt((grouped ** 2).sum(axis=2)) > 0


def make_labels(trace: ActivationTrace, group_size: int) -> np.ndarray:
    src = trace.values if trace.values is not None else trace.nonzero
    return group_activity(src, group_size)


def gate_forward(gate: MicroGate, x, counter: MacCounter | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[-1] != gate.d:
        raise DimensionError(f"input width {x.shape[-1]} != gate width {gate.d}")
    return sigmoid(matvec(gate.wg, x, counter) + gate.bg)


def bce_loss_and_grads(wg, bg, x, y):
    """Mean over samples of ``sum_k BCE(p_k, y_k) / g`` and its gradient.

    Runs in the dtype of ``wg``; uses dL/dlogit = (p - y) / g per sample.
    """
    dtype = wg.dtype
    x = np.asarray(x, dtype=dtype)
    y = np.asarray(y, dtype=dtype)
    n, g = y.shape
    logits = x @ wg.T + bg
    with np.errstate(over="ignore"):
        p = 1.0 / (1.0 + np.exp(-logits.astype(np.float64)))
    pc = np.clip(p, SIGMOID_EPS, 1.0 - SIGMOID_EPS)
    loss = float(-(y * np.log(pc) + (1 - y) * np.log(1 - pc)).sum() / (n * g))
    dlogit = ((p - y) / (n * g)).astype(dtype)
    return loss, dlogit.T @ x, dlogit.sum(axis=0)


@dataclass
class GateTrainConfig:
    epochs: int = 5
    learning_rate: float = 0.1
    batch_size: int = 32
    seed: int = 0
    gate_ratio: float = DEFAULT_GATE_RATIO
    threshold: float = 0.5

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class GateMetrics:
    loss_curve: list[float]
    accuracy: float  # at the 0.5 decision point, on the training data
    positive_rate: float  # fraction of active groups in the labels


def init_gate(layer: int, d: int, f: int, g: int, seed: int, threshold: float = 0.5) -> MicroGate:
    rng = Rng(seed)
    return MicroGate(layer, rng.normal((g, d), 0.01), np.zeros(g), f, threshold)


def fit_gate(gate: MicroGate, x: np.ndarray, labels: np.ndarray, cfg: GateTrainConfig):
    """Mini-batch SGD on BCE. Returns ``(new_gate, loss_curve)``."""
    wg, bg = gate.wg.copy(), gate.bg.copy()
    rng = Rng(cfg.seed + 1)
    lr = DTYPE(cfg.learning_rate)
    y = labels.astype(DTYPE)
    n = x.shape[0]
    curve = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            loss, gw, gb = bce_loss_and_grads(wg, bg, x[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"gate loss became {loss} at epoch {epoch}")
            losses.append(loss)
            wg = (wg - lr * gw).astype(DTYPE)
            bg = (bg - lr * gb).astype(DTYPE)
        curve.append(float(np.mean(losses)))
        log.info("gate layer %d epoch %d bce %.5f", gate.layer, epoch, curve[-1])
    return MicroGate(gate.layer, wg, bg, gate.f, gate.threshold), curve


def gate_accuracy(gate: MicroGate, x, labels, threshold: float = 0.5) -> float:
    pred = gate_forward(gate, x) >= DTYPE(threshold)
    return float((pred == labels).mean())


def train_gate(base: BaseModel, layer: int, data: SynthDataset, cfg: GateTrainConfig,
               inputs: list | None = None):
    """Train the gate of one layer against the frozen base. Returns ``(gate, metrics)``.

    ``inputs`` may carry precomputed ``layer_inputs(base, data.x)``.
    """
    if data.n < 1:
        raise ConfigError("gate training data is empty")
    if not 0 <= layer < base.layer_count:
        raise DimensionError(f"layer {layer} out of range")
    blk = base.layers[layer]
    g = gate_width(blk.f, cfg.gate_ratio)
    x = (inputs or layer_inputs(base, data.x))[layer]
    labels = group_activity(ff_forward(blk, x)[0], blk.f // g)
    gate = init_gate(layer, blk.d, blk.f, g, cfg.seed + 1000 * layer, cfg.threshold)
    gate, curve = fit_gate(gate, x, labels, cfg)
    return gate, GateMetrics(curve, gate_accuracy(gate, x, labels), float(labels.mean()))


@dataclass
class MgsCounters:
    gate: MacCounter = field(default_factory=MacCounter)
    layer1: MacCounter = field(default_factory=MacCounter)
    layer2: MacCounter = field(default_factory=MacCounter)


def mgs_block(block: FFBlock, gate: MicroGate, x, counters: MgsCounters | None = None, scores=None):
    """Gated block forward on a batch.

    ``scores`` overrides the gate output (e.g. true labels for an oracle
    gate); the gate is then not evaluated.  Returns ``(hidden, out, active)``
    with ``active`` the bool ``(n, g)`` group decisions.
    """
    gate.check_block(block)
    x = np.atleast_2d(np.asarray(x, dtype=DTYPE))
    counters = counters or MgsCounters()
    if scores is None:
        scores = gate_forward(gate, x, counters.gate)
    else:
        scores = np.atleast_2d(np.asarray(scores, dtype=DTYPE))
        counters.gate.add(np.zeros(x.shape[0], dtype=np.int64))
    active = scores >= gate.threshold
    rows = np.repeat(active, gate.group_size, axis=1)
    pre = masked_matvec(block.w1, x, rows, counters.layer1) + block.b1
    hidden = np.where(rows, relu(pre), DTYPE(0))
    out = column_pruned_matvec(block.w2, hidden, rows, counters.layer2) + block.b2
    return hidden, out, active, scores


def mgs_forward(block: FFBlock, gate: MicroGate, x, scores=None):
    """Single-block gated forward. Returns ``(out, active_groups)``."""
    x = np.asarray(x, dtype=DTYPE)
    _, out, active, _ = mgs_block(block, gate, x, scores=scores)
    counts = active.sum(axis=1)
    if x.ndim == 1:
        return out[0], int(counts[0])
    return out, counts


@dataclass
class MgsLayerStats:
    group_size: int
    active: np.ndarray  # bool (n, g)
    labels: np.ndarray  # bool (n, g), true activity for the input this layer actually saw
    correct_at_half: np.ndarray  # bool (n, g), decision at 0.5 vs labels
    counters: MgsCounters

    @property
    def sparsity(self) -> float:
        return 1.0 - float(self.active.mean())

    @property
    def accuracy(self) -> float:
        return float(self.correct_at_half.mean())


def mgs_model_forward(model: BaseModel, gates: dict, x, oracle: bool = False):
    """Residual forward gating the layers present in ``gates``."""
    x = np.asarray(x, dtype=DTYPE)
    stats = {}
    for i, blk in enumerate(model.layers):
        gate = gates.get(i)
        if gate is None:
            x = x + ff_forward(blk, x)[1]
            continue
        labels = group_activity(ff_forward(blk, x)[0], gate.group_size)
        counters = MgsCounters()
        _, out, active, scores = mgs_block(blk, gate, x, counters,
                                           scores=labels.astype(DTYPE) if oracle else None)
        correct = (scores >= DTYPE(0.5)) == labels
        stats[i] = MgsLayerStats(gate.group_size, active, labels, correct, counters)
        x = x + out
    return x, stats


@dataclass
class LayerEvalRow:
    layer: str
    accuracy: float
    quality: float
    sparsity: float
    threshold: str


def _fmt_threshold(values) -> str:
    values = sorted({float(v) for v in values})
    if not values:
        return "0"
    return f"{values[0]:g}" if len(values) == 1 else "dynamic"


def evaluate_config(base: BaseModel, gates: dict, data: SynthDataset):
    """Quality, masked-neuron sparsity and accuracy with all ``gates`` active."""
    final, stats = mgs_model_forward(base, gates, data.x)
    q = quality(final, data.y)
    if not stats:
        return q, 0.0, 0.0, stats
    sp = float(np.mean([s.sparsity for s in stats.values()]))
    acc = float(np.mean([s.accuracy for s in stats.values()]))
    return q, sp, acc, stats


def evaluate_gated(base: BaseModel, gates, data: SynthDataset) -> list[LayerEvalRow]:
    """Per-layer ablation rows, then ``vanilla`` and ``all`` rows.

    ``gates`` is a per-layer list; ``None`` entries are disabled layers and
    produce no per-layer row.  Sparsity is the fraction of hidden neurons
    masked over the evaluation data.
    """
    gates = list(gates)
    if len(gates) != base.layer_count:
        raise ConfigError(f"need one gate entry per layer ({base.layer_count}), got {len(gates)}")
    rows = []
    for i, gate in enumerate(gates):
        if gate is None:
            continue
        q, sp, acc, _ = evaluate_config(base, {i: gate}, data)
        rows.append(LayerEvalRow(str(i), acc, q, sp, _fmt_threshold([gate.threshold])))
    _, final = model_forward(base, data.x)
    rows.append(LayerEvalRow("vanilla", 0.0, quality(final, data.y), 0.0, "0"))
    enabled = {i: g for i, g in enumerate(gates) if g is not None}
    q, _, _, stats = evaluate_config(base, enabled, data)
    masked = sum(int((~s.active).sum()) * s.group_size for s in stats.values())
    total = len(gates) * base.f * data.n
    acc = (float(np.concatenate([s.correct_at_half.ravel() for s in stats.values()]).mean())
           if stats else 0.0)
    rows.append(LayerEvalRow("all", acc, q, masked / total,
                             _fmt_threshold([g.threshold for g in enabled.values()])))
    return rows


@dataclass
class TuneResult:
    thresholds: list[float]
    quality: float
    vanilla_quality: float
    sparsity: float
    steps: list[tuple[int, float]]  # (layer, new threshold) in order applied
    within_budget: bool


def tune_thresholds(base: BaseModel, gates, data: SynthDataset, quality_budget: float,
                    grid=THRESHOLD_GRID) -> TuneResult:
    """Greedy coordinate descent over a discrete threshold grid.

    Starts with every gate at the top of the grid, then repeatedly lowers by
    one grid step the layer whose relaxation buys the most quality per unit
    of sparsity given up (lower layer index on ties) until the quality
    degradation versus vanilla is within ``quality_budget``.
    """
    if quality_budget < 0:
        raise ConfigError("quality_budget must be >= 0")
    grid = sorted(float(v) for v in grid)
    gates = list(gates)
    vanilla = quality(model_forward(base, data.x)[1], data.y)
    level = {i: len(grid) - 1 for i, g in enumerate(gates) if g is not None}

    def config(levels):
        return {i: gates[i].with_threshold(grid[k]) for i, k in levels.items()}

    q, sp, _, _ = evaluate_config(base, config(level), data)
    steps = []
    while q - vanilla > quality_budget:
        best = None
        for i in sorted(level):
            if level[i] == 0:
                continue
            trial = dict(level)
            trial[i] -= 1
            tq, tsp, _, _ = evaluate_config(base, config(trial), data)
            gain = q - tq
            lost = sp - tsp
            score = gain / lost if lost > 1e-12 else (math.inf if gain > 0 else gain)
            if best is None or score > best[0]:
                best = (score, i, tq, tsp)
        if best is None:
            break
        _, i, q, sp = best
        level[i] -= 1
        steps.append((i, grid[level[i]]))
    thresholds = [grid[level[i]] if i in level else 0.0 for i in range(len(gates))]
    return TuneResult(thresholds, q, vanilla, sp, steps, q - vanilla <= quality_budget)
