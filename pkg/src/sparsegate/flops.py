"""MAC accounting for dense, SIBS and MGS inference.

Counts are multiply-accumulates per token; bias adds and activation
evaluations are not included.  1 MAC = 2 FLOPs, applied only when reporting.
``measure`` cross-checks the closed-form counts against the counters the
kernels increment while they run.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import AccountingError
from .mgs import mgs_model_forward
from .model import BaseModel, model_forward
from .numerics import MacCounter
from .sibs import sibs_model_forward
from .toytrain import SynthDataset, quality


def dense_ff_macs(d: int, f: int) -> int:
    return d * f + f * d


def mgs_macs(d: int, f: int, g: int, active_neurons: int) -> int:
    """Gate, then only the active neurons in both linear layers."""
    if not 0 <= active_neurons <= f:
        raise ValueError(f"active_neurons must be in [0, {f}], got {active_neurons}")
    return g * d + active_neurons * d + active_neurons * d


def sibs_macs(d: int, f: int, indicators: int, computed_neurons: int) -> int:
    """Indicator rows, remaining computed rows, then layer 2 over every
    computed neuron (indicators included)."""
    if not 0 <= indicators <= computed_neurons <= f:
        raise ValueError(
            f"inconsistent SIBS counts: indicators={indicators}, computed={computed_neurons}, f={f}"
        )
    return indicators * d + (computed_neurons - indicators) * d + computed_neurons * d


@dataclass
class MethodConfig:
    """``method`` is one of ``vanilla``, ``mgs``, ``mgs-disabled`` or ``sibs``.

    ``mgs-disabled`` removes the gates entirely; an ``mgs`` gate with
    threshold 0 still pays for evaluating the gate.
    """

    label: str
    method: str
    gates: dict | None = None  # layer -> MicroGate
    tables: dict | None = None  # layer -> IndicatorTable


@dataclass
class FlopsRow:
    config: str
    layer: str
    samples: int
    dense_macs: int
    gate_macs: int
    layer1_macs: int
    layer2_macs: int
    indicator_macs: int
    measured_sparsity: float

    @property
    def method_macs(self) -> int:
        return self.gate_macs + self.layer1_macs + self.layer2_macs + self.indicator_macs

    @property
    def saved_fraction_exact(self) -> Fraction:
        return 1 - Fraction(self.method_macs, self.dense_macs)

    @property
    def saved_fraction(self) -> float:
        return float(self.saved_fraction_exact)


@dataclass
class FlopsReport:
    rows: list[FlopsRow]
    quality: float

    @property
    def total(self) -> FlopsRow:
        return self.rows[-1]


def _check(label: str, layer: int, analytic: np.ndarray, counted: np.ndarray) -> None:
    if counted is None or not np.array_equal(analytic, counted):
        bad = int(np.flatnonzero(analytic != counted)[0]) if counted is not None else 0
        raise AccountingError(
            f"{label} layer {layer}: analytic MACs disagree with instrumented count at sample {bad}"
        )


def _sum(*counters: MacCounter) -> np.ndarray:
    return sum(c.per_sample for c in counters)


def measure(base: BaseModel, config: MethodConfig, data: SynthDataset) -> FlopsReport:
    """Instrumented run of ``config`` over ``data``; raises AccountingError if
    any per-sample count differs from the closed-form formulas."""
    d, f, n = base.d, base.f, data.n
    dense = dense_ff_macs(d, f)
    rows = []
    if config.method in ("vanilla", "mgs-disabled"):
        counter = MacCounter()
        _, final = model_forward(base, data.x, counter)
        _check(config.label, -1, np.full(n, dense * base.layer_count), counter.per_sample)
        for i in range(base.layer_count):
            rows.append(FlopsRow(config.label, str(i), n, dense * n, 0, d * f * n, d * f * n, 0, 0.0))
    elif config.method == "mgs":
        final, stats = mgs_model_forward(base, config.gates or {}, data.x)
        for i in range(base.layer_count):
            st = stats.get(i)
            if st is None:
                rows.append(FlopsRow(config.label, str(i), n, dense * n, 0, d * f * n, d * f * n, 0, 0.0))
                continue
            g = st.active.shape[1]
            active = st.active.sum(axis=1) * st.group_size
            c = st.counters
            analytic = np.array([mgs_macs(d, f, g, int(a)) for a in active], dtype=np.int64)
            _check(config.label, i, analytic, _sum(c.gate, c.layer1, c.layer2))
            rows.append(FlopsRow(config.label, str(i), n, dense * n, c.gate.total, c.layer1.total,
                                 c.layer2.total, 0, 1.0 - float(active.sum()) / (f * n)))
    elif config.method == "sibs":
        final, stats = sibs_model_forward(base, config.tables or {}, data.x)
        for i in range(base.layer_count):
            st = stats.get(i)
            if st is None:
                rows.append(FlopsRow(config.label, str(i), n, dense * n, 0, d * f * n, d * f * n, 0, 0.0))
                continue
            computed = f - st.skipped
            c = st.counters
            analytic = np.array([sibs_macs(d, f, st.indicators, int(k)) for k in computed],
                                dtype=np.int64)
            _check(config.label, i, analytic, _sum(c.indicator, c.layer1, c.layer2))
            rows.append(FlopsRow(config.label, str(i), n, dense * n, 0, c.layer1.total, c.layer2.total,
                                 c.indicator.total, float(st.skipped.sum()) / (f * n)))
    else:
        raise ValueError(f"unknown method {config.method!r}")

    total = FlopsRow(config.label, "total", n,
                     sum(r.dense_macs for r in rows), sum(r.gate_macs for r in rows),
                     sum(r.layer1_macs for r in rows), sum(r.layer2_macs for r in rows),
                     sum(r.indicator_macs for r in rows),
                     float(np.mean([r.measured_sparsity for r in rows])))
    return FlopsReport(rows + [total], quality(final, data.y))


FLOPS_CSV_HEADER = ["config", "layer", "dense_macs", "method_macs", "gate_macs",
                    "saved_fraction", "measured_sparsity"]


def report_rows(report: FlopsReport) -> list[list]:
    return [[r.config, r.layer, r.dense_macs, r.method_macs, r.gate_macs,
             f"{r.saved_fraction:.6f}", f"{r.measured_sparsity:.6f}"] for r in report.rows]
