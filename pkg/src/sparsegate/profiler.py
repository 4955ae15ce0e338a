"""Activation traces, sparsity statistics and the random vs top-k masking study."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import binio
from .errors import DimensionError
from .model import BaseModel, layer_inputs, model_forward
from .numerics import DTYPE, Rng, map_sample_chunks, matvec, relu
from .toytrain import SynthDataset, quality

TRACE_MAGIC = b"MGST"
TRACE_VERSION = 1
MODE_FULL = 0
MODE_BITMAP = 1


@dataclass
class ActivationTrace:
    """Post-ReLU activations of one layer, ``samples x f``.

    In bitmap mode only the nonzero pattern is stored (``values`` is None).
    """

    layer: int
    nonzero: np.ndarray  # bool (samples, f)
    values: np.ndarray | None = None

    @property
    def samples(self) -> int:
        return self.nonzero.shape[0]

    @property
    def f(self) -> int:
        return self.nonzero.shape[1]

    @property
    def mode(self) -> str:
        return "full" if self.values is not None else "bitmap"

    @classmethod
    def from_values(cls, layer: int, values: np.ndarray, mode: str = "full") -> "ActivationTrace":
        values = np.asarray(values, dtype=DTYPE)
        if (values < 0).any():
            raise ValueError("post-ReLU trace values must be nonnegative")
        nz = values != 0
        return cls(layer, nz, values if mode == "full" else None)

    def to_bitmap(self) -> "ActivationTrace":
        return ActivationTrace(self.layer, self.nonzero)


@dataclass
class SparsityProfile:
    zero_fraction: np.ndarray
    mean_sparsity: float
    dead_neurons: frozenset


def _check_layers(model: BaseModel, layers) -> list[int]:
    if layers is None:
        return list(range(model.layer_count))
    layers = [int(i) for i in layers]
    for i in layers:
        if not 0 <= i < model.layer_count:
            raise DimensionError(f"layer {i} out of range for a {model.layer_count}-layer model")
    return layers


def collect_traces(model: BaseModel, data: SynthDataset, layers=None, mode: str = "full",
                   threads: int = 1) -> list[ActivationTrace]:
    if mode not in ("full", "bitmap"):
        raise ValueError(f"unknown trace mode {mode!r}")
    layers = _check_layers(model, layers)
    if data.n < 1:
        raise ValueError("cannot trace an empty dataset")
    chunks = map_sample_chunks(lambda lo, hi: model_forward(model, data.x[lo:hi])[0],
                               data.n, threads)
    traces = []
    for i in layers:
        hidden = np.concatenate([c[i] for c in chunks], axis=0)
        traces.append(ActivationTrace.from_values(i, hidden, mode))
    return traces


def sparsity_stats(trace: ActivationTrace) -> SparsityProfile:
    zero_fraction = (~trace.nonzero).sum(axis=0) / trace.samples
    dead = frozenset(int(i) for i in np.flatnonzero(~trace.nonzero.any(axis=0)))
    return SparsityProfile(zero_fraction, float(zero_fraction.mean()), dead)


def save_trace(trace: ActivationTrace, path) -> None:
    flag = MODE_FULL if trace.values is not None else MODE_BITMAP
    if flag == MODE_FULL:
        payload = binio.floats(trace.values)
    else:
        payload = np.packbits(trace.nonzero.ravel(), bitorder="little").tobytes()
    binio.write_file(path, [
        TRACE_MAGIC, binio.u32(TRACE_VERSION), binio.u32(trace.layer),
        binio.u32(trace.samples), binio.u32(trace.f), bytes([flag]), payload,
    ])


def load_trace(path) -> ActivationTrace:
    r = binio.read_file(path)
    r.header(TRACE_MAGIC, TRACE_VERSION)
    layer, samples, f = r.u32(), r.u32(), r.u32()
    flag = r.u8()
    if flag == MODE_FULL:
        return ActivationTrace.from_values(layer, r.floats(samples, f))
    if flag != MODE_BITMAP:
        raise ValueError(f"{path}: unknown trace mode flag {flag}")
    count = binio.checked_count(samples, f)
    bits = np.frombuffer(r.raw((count + 7) // 8), dtype=np.uint8)
    nz = np.unpackbits(bits, count=count, bitorder="little").astype(bool)
    return ActivationTrace(layer, nz.reshape(samples, f))


def masked_forward(model: BaseModel, x, mask_fn, layers=None, start: int = 0):
    """Dense forward where ``mask_fn(layer, hidden) -> bool keep-mask`` is
    applied to the hidden vector of each layer in ``layers``.

    ``x`` is the input of layer ``start`` (earlier layers are not run).
    Returns ``(final, zero_fraction)`` where the zero fraction is measured on
    the masked hidden vectors of the masked layers.
    """
    layers = set(_check_layers(model, layers))
    if any(i < start for i in layers):
        raise ValueError("masked layers must not precede the start layer")
    x = np.asarray(x, dtype=DTYPE)
    zeros = total = 0
    for i, blk in enumerate(model.layers[start:], start):
        h = relu(matvec(blk.w1, x) + blk.b1)
        if i in layers:
            h = np.where(mask_fn(i, h), h, DTYPE(0))
            zeros += int((h == 0).sum())
            total += h.size
        x = x + (matvec(blk.w2, h) + blk.b2)
    return x, (zeros / total if total else 0.0)


def _start(model: BaseModel, data: SynthDataset, layers, inputs):
    """Skip the dense prefix before the first masked layer when inputs are cached."""
    if inputs is None or layers is None:
        return data.x, 0
    first = min(_check_layers(model, layers))
    return inputs[first], first


def random_mask_eval(model: BaseModel, data: SynthDataset, keep_fraction: float, seed: int,
                     layers=None, return_sparsity: bool = False, inputs=None):
    """Quality under a fresh Bernoulli(keep_fraction) mask per sample and layer.

    No 1/keep rescaling is applied.  ``inputs`` may carry precomputed
    ``layer_inputs(model, data.x)``.
    """
    if not 0.0 <= keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must be in [0, 1], got {keep_fraction}")
    rng = Rng(seed)
    x, start = _start(model, data, layers, inputs)
    final, sp = masked_forward(model, x, lambda _, h: rng.bernoulli(keep_fraction, h.shape),
                               layers, start)
    q = quality(final, data.y)
    return (q, sp) if return_sparsity else q


def topk_mask(h: np.ndarray, k: int) -> np.ndarray:
    """Keep-mask of the k largest entries per row; ties go to the lower index."""
    n, f = h.shape
    order = np.argsort(-h, axis=1, kind="stable")
    keep = np.zeros((n, f), dtype=bool)
    np.put_along_axis(keep, order[:, :k], True, axis=1)
    return keep


def topk_mask_eval(model: BaseModel, data: SynthDataset, k: int, layers=None,
                   return_sparsity: bool = False, inputs=None):
    if not 0 <= k <= model.f:
        raise ValueError(f"k must be in [0, {model.f}], got {k}")
    x, start = _start(model, data, layers, inputs)
    final, sp = masked_forward(model, x, lambda _, h: topk_mask(h, k), layers, start)
    q = quality(final, data.y)
    return (q, sp) if return_sparsity else q


@dataclass
class MaskStudyRow:
    layer: str
    method: str
    level: float
    sparsity: float
    quality: float


def mask_study(model: BaseModel, data: SynthDataset, method: str, levels, seeds=(0,),
               per_layer: bool = True) -> list[MaskStudyRow]:
    """Sweep mask levels (fraction of hidden slots forced to zero).

    ``random`` keeps each slot with probability ``1 - level`` and is averaged
    over ``seeds``; ``topk`` keeps ``round((1 - level) * f)`` slots.  One row
    per layer when ``per_layer`` plus an ``all`` row masking every layer.
    """
    if method not in ("random", "topk"):
        raise ValueError(f"unknown masking method {method!r}")
    targets = [([i], str(i)) for i in range(model.layer_count)] if per_layer else []
    targets.append((None, "all"))
    inputs = layer_inputs(model, data.x)
    rows = []
    for level in levels:
        for layers, label in targets:
            if method == "random":
                runs = [random_mask_eval(model, data, 1.0 - level, s, layers, True, inputs)
                        for s in seeds]
                q = float(np.mean([r[0] for r in runs]))
                sp = float(np.mean([r[1] for r in runs]))
            else:
                k = int(round((1.0 - level) * model.f))
                q, sp = topk_mask_eval(model, data, k, layers, True, inputs)
            rows.append(MaskStudyRow(label, method, float(level), sp, q))
    return rows
