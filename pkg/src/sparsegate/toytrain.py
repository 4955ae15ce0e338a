"""Synthetic data and plain-SGD training of the frozen base model.

The data are a standardised Gaussian mixture; targets come from a random
"teacher" residual stack with the same shape as the student, so the
regression task is exactly realisable.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import binio
from .errors import ConfigError, DimensionError, TrainingDivergedError
from .model import BaseModel, FFBlock, model_forward
from .numerics import DTYPE, Rng

log = logging.getLogger(__name__)

DATASET_MAGIC = b"MGSD"
DATASET_VERSION = 1


@dataclass(frozen=True)
class DatasetSpec:
    d: int = 64
    components: int = 8
    # Component means ~ N(0, mean_scale^2); per-dimension scales ~ U(scale_low, scale_high).
    mean_scale: float = 2.0
    scale_low: float = 0.5
    scale_high: float = 1.0
    teacher_f: int = 256
    teacher_layers: int = 6
    teacher_bias_shift: float = 1.6
    seed: int = 0


@dataclass
class SynthDataset:
    x: np.ndarray  # (n, d)
    y: np.ndarray  # (n, d)
    spec: DatasetSpec | None = field(default=None, compare=False)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def subset(self, lo: int, hi: int) -> "SynthDataset":
        return SynthDataset(self.x[lo:hi], self.y[lo:hi], self.spec)


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    sparsity_bias_shift: float = 1.6

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.sparsity_bias_shift < 0:
            raise ConfigError("sparsity_bias_shift must be nonnegative")


def teacher_model(spec: DatasetSpec) -> BaseModel:
    return init_base(spec.d, spec.teacher_f, spec.teacher_layers,
                     seed=spec.seed + 7919, sparsity_bias_shift=spec.teacher_bias_shift)


def generate_dataset(spec: DatasetSpec, n: int, seed: int) -> SynthDataset:
    if n < 1:
        raise ConfigError(f"dataset size must be >= 1, got {n}")
    mix = Rng(spec.seed)
    means = mix.normal((spec.components, spec.d), spec.mean_scale).astype(np.float64)
    scales = mix.uniform((spec.components, spec.d), spec.scale_low, spec.scale_high)

    rng = Rng(seed)
    comp = rng.integers(0, spec.components, n)
    noise = rng.normal((n, spec.d)).astype(np.float64)
    x = means[comp] + scales[comp] * noise
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd[sd == 0] = 1.0
    x = ((x - mu) / sd).astype(DTYPE)

    _, y = model_forward(teacher_model(spec), x)
    return SynthDataset(x, y, spec)


def save_dataset(data: SynthDataset, path) -> None:
    binio.write_file(path, [
        DATASET_MAGIC, binio.u32(DATASET_VERSION), binio.u32(data.n), binio.u32(data.d),
        binio.floats(data.x), binio.floats(data.y),
    ])


def load_dataset(path) -> SynthDataset:
    r = binio.read_file(path)
    r.header(DATASET_MAGIC, DATASET_VERSION)
    n, d = r.u32(), r.u32()
    binio.checked_count(2 * n, d)
    x = r.floats(n, d)
    y = r.floats(n, d)
    return SynthDataset(x, y)


def init_base(d: int, f: int, layer_count: int, seed: int, sparsity_bias_shift: float = 0.0) -> BaseModel:
    """Weights ~ N(0, 1/d); b1 = -shift * ||w1 row|| so that each unit fires
    with probability 1 - Phi(shift) on standardised Gaussian input."""
    if min(d, f, layer_count) < 1:
        raise DimensionError(f"dimensions must be positive: d={d} f={f} layers={layer_count}")
    rng = Rng(seed)
    std = 1.0 / np.sqrt(d)
    layers = []
    for _ in range(layer_count):
        w1 = rng.normal((f, d), std)
        w2 = rng.normal((d, f), std)
        norms = np.sqrt((w1.astype(np.float64) ** 2).sum(axis=1))
        b1 = (-sparsity_bias_shift * norms + 0.0).astype(DTYPE)  # no -0.0 entries
        layers.append(FFBlock(w1, b1, w2, np.zeros(d, dtype=DTYPE)))
    return BaseModel(layers)


def base_quality(model: BaseModel, data: SynthDataset) -> float:
    """Mean over samples of ||final - y||^2 / d."""
    _, final = model_forward(model, data.x)
    return quality(final, data.y)


def quality(final: np.ndarray, y: np.ndarray) -> float:
    diff = final.astype(np.float64) - y.astype(np.float64)
    return float((diff ** 2).sum(axis=1).mean() / y.shape[1])


def mse_loss_and_grads(params, x, y):
    """Loss and gradients of the mean ``||final - y||^2 / d`` for a residual stack.

    ``params`` is a list of ``(w1, b1, w2, b2)`` tuples; the computation runs in
    their dtype.  Returns ``(loss, grads)`` with grads in the same layout.
    """
    dtype = params[0][0].dtype
    x = np.asarray(x, dtype=dtype)
    y = np.asarray(y, dtype=dtype)
    n, d = x.shape
    acts = []
    h_in = x
    for w1, b1, w2, b2 in params:
        z = h_in @ w1.T + b1
        h = np.maximum(z, 0)
        acts.append((h_in, z, h))
        h_in = h_in + h @ w2.T + b2
    resid = h_in - y
    loss = float((resid.astype(np.float64) ** 2).sum() / (n * d))

    g = (2.0 / (n * d)) * resid
    grads = [None] * len(params)
    for i in range(len(params) - 1, -1, -1):
        w1, b1, w2, b2 = params[i]
        h_in, z, h = acts[i]
        gw2 = g.T @ h
        gb2 = g.sum(axis=0)
        dz = (g @ w2) * (z > 0)
        gw1 = dz.T @ h_in
        gb1 = dz.sum(axis=0)
        grads[i] = (gw1.astype(dtype), gb1.astype(dtype), gw2.astype(dtype), gb2.astype(dtype))
        g = g + dz @ w1
    return loss, grads


def model_params(model: BaseModel, dtype=DTYPE):
    return [tuple(np.array(a, dtype=dtype) for a in (b.w1, b.b1, b.w2, b.b2)) for b in model.layers]


def train_base(model: BaseModel, data: SynthDataset, cfg: TrainConfig) -> tuple[BaseModel, list[float]]:
    """Mini-batch SGD on MSE. Returns a new model and per-epoch mean losses."""
    if data.n < 1:
        raise ConfigError("training data is empty")
    # Overflow on the way to divergence is reported as TrainingDivergedError.
    with np.errstate(over="ignore", invalid="ignore"):
        return _sgd(model, data, cfg)


def _sgd(model: BaseModel, data: SynthDataset, cfg: TrainConfig) -> tuple[BaseModel, list[float]]:
    params = [list(p) for p in model_params(model)]
    rng = Rng(cfg.seed)
    lr = DTYPE(cfg.learning_rate)
    curve = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(data.n)
        losses = []
        for lo in range(0, data.n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            loss, grads = mse_loss_and_grads(params, data.x[idx], data.y[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"loss became {loss} at epoch {epoch}, batch offset {lo}; lower the learning rate"
                )
            losses.append(loss)
            for p, g in zip(params, grads):
                for k in range(4):
                    p[k] = (p[k] - lr * g[k]).astype(DTYPE)
        curve.append(float(np.mean(losses)))
        log.info("epoch %d loss %.6f", epoch, curve[-1])
    return BaseModel([FFBlock(*p) for p in params]), curve
