"""Frozen base model: a residual stack of ReLU feedforward blocks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import binio
from .errors import DimensionError
from .numerics import DTYPE, MacCounter, as_matrix, matvec, relu

CHECKPOINT_MAGIC = b"MGSB"
CHECKPOINT_VERSION = 1


@dataclass
class FFBlock:
    """``hidden = relu(w1 @ x + b1)``, ``out = w2 @ hidden + b2``."""

    w1: np.ndarray  # (f, d)
    b1: np.ndarray  # (f,)
    w2: np.ndarray  # (d, f)
    b2: np.ndarray  # (d,)

    def __post_init__(self):
        self.w1 = as_matrix(self.w1)
        self.w2 = as_matrix(self.w2)
        self.b1 = np.ascontiguousarray(self.b1, dtype=DTYPE)
        self.b2 = np.ascontiguousarray(self.b2, dtype=DTYPE)
        f, d = self.w1.shape
        if self.w2.shape != (d, f) or self.b1.shape != (f,) or self.b2.shape != (d,):
            raise DimensionError(
                f"inconsistent block shapes w1={self.w1.shape} b1={self.b1.shape} "
                f"w2={self.w2.shape} b2={self.b2.shape}"
            )

    @property
    def d(self) -> int:
        return self.w1.shape[1]

    @property
    def f(self) -> int:
        return self.w1.shape[0]

    def check_groups(self, group_size: int) -> None:
        if group_size <= 0 or self.f % group_size:
            raise DimensionError(f"hidden width {self.f} is not divisible by group size {group_size}")

    @classmethod
    def zeros(cls, d: int, f: int) -> "FFBlock":
        return cls(np.zeros((f, d)), np.zeros(f), np.zeros((d, f)), np.zeros(d))

    def copy(self) -> "FFBlock":
        return FFBlock(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())


@dataclass
class BaseModel:
    layers: list[FFBlock]

    def __post_init__(self):
        if not self.layers:
            raise DimensionError("a base model needs at least one layer")
        d, f = self.layers[0].d, self.layers[0].f
        for blk in self.layers:
            if blk.d != d or blk.f != f:
                raise DimensionError("all blocks must share d and f")

    @property
    def d(self) -> int:
        return self.layers[0].d

    @property
    def f(self) -> int:
        return self.layers[0].f

    @property
    def layer_count(self) -> int:
        return len(self.layers)

    def copy(self) -> "BaseModel":
        return BaseModel([b.copy() for b in self.layers])

    def to_bytes(self) -> bytes:
        return b"".join(checkpoint_chunks(self))


def ff_forward(block: FFBlock, x, counter: MacCounter | None = None):
    """Dense block forward. Returns ``(hidden, out)``."""
    hidden = relu(matvec(block.w1, x, counter) + block.b1)
    out = matvec(block.w2, hidden, counter) + block.b2
    return hidden, out


def model_forward(model: BaseModel, x, counter: MacCounter | None = None):
    """Residual forward ``x <- x + ff(x)``. Returns ``(hiddens, final)``."""
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[-1] != model.d:
        raise DimensionError(f"input width {x.shape[-1]} != model width {model.d}")
    hiddens = []
    for blk in model.layers:
        h, out = ff_forward(blk, x, counter)
        hiddens.append(h)
        x = x + out
    return hiddens, x


def forward_from(model: BaseModel, x, start: int) -> np.ndarray:
    """Dense residual forward of ``layers[start:]`` given the input of layer ``start``."""
    x = np.asarray(x, dtype=DTYPE)
    for blk in model.layers[start:]:
        x = x + ff_forward(blk, x)[1]
    return x


def layer_inputs(model: BaseModel, x) -> list[np.ndarray]:
    """Residual-stream input of every layer under dense inference."""
    x = np.asarray(x, dtype=DTYPE)
    inputs = []
    for blk in model.layers:
        inputs.append(x)
        x = x + ff_forward(blk, x)[1]
    return inputs


def checkpoint_chunks(model: BaseModel):
    yield CHECKPOINT_MAGIC
    yield binio.u32(CHECKPOINT_VERSION)
    yield binio.u32(model.d)
    yield binio.u32(model.f)
    yield binio.u32(model.layer_count)
    for blk in model.layers:
        yield binio.floats(blk.w1)
        yield binio.floats(blk.b1)
        yield binio.floats(blk.w2)
        yield binio.floats(blk.b2)


def save_checkpoint(model: BaseModel, path) -> None:
    binio.write_file(path, checkpoint_chunks(model))


def load_checkpoint(path) -> BaseModel:
    r = binio.read_file(path)
    r.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    d, f, n_layers = r.u32(), r.u32(), r.u32()
    binio.checked_count(n_layers, 2 * d * f + d + f)
    if d == 0 or f == 0 or n_layers == 0:
        raise DimensionError(f"{path}: degenerate dimensions d={d} f={f} layers={n_layers}")
    layers = []
    for _ in range(n_layers):
        w1 = r.floats(f, d)
        b1 = r.floats(f)
        w2 = r.floats(d, f)
        b2 = r.floats(d)
        layers.append(FFBlock(w1, b1, w2, b2))
    return BaseModel(layers)
