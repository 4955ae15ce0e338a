"""Little-endian header/payload helpers shared by the artifact file formats."""
from __future__ import annotations

import struct

import numpy as np

from .errors import BadMagicError, DimensionOverflowError, TruncatedFileError, VersionMismatchError

# Refuse headers that would describe more than this many float32 values.
MAX_ELEMENTS = 1 << 31


class Reader:
    def __init__(self, buf: bytes, path=None):
        self.buf = buf
        self.pos = 0
        self.path = path

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(
                f"{self.path or 'buffer'}: truncated at byte {len(self.buf)}, needed {self.pos + n}"
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def header(self, magic: bytes, version: int) -> None:
        got = self._take(4)
        if got != magic:
            raise BadMagicError(f"{self.path or 'buffer'}: bad magic {got!r}, expected {magic!r}")
        v = self.u32()
        if v != version:
            raise VersionMismatchError(f"{self.path or 'buffer'}: version {v}, expected {version}")

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def f32(self) -> np.float32:
        return np.frombuffer(self._take(4), dtype="<f4")[0].astype(np.float32)

    def u8(self) -> int:
        return self._take(1)[0]

    def floats(self, *shape: int) -> np.ndarray:
        count = checked_count(*shape)
        arr = np.frombuffer(self._take(4 * count), dtype="<f4")
        return arr.astype(np.float32).reshape(shape)

    def u32s(self, count: int) -> np.ndarray:
        checked_count(count)
        return np.frombuffer(self._take(4 * count), dtype="<u4").astype(np.int64)

    def raw(self, n: int) -> bytes:
        return self._take(n)

    def done(self) -> bool:
        return self.pos == len(self.buf)


def checked_count(*shape: int) -> int:
    count = 1
    for s in shape:
        count *= int(s)
    if count > MAX_ELEMENTS:
        raise DimensionOverflowError(f"declared shape {shape} exceeds {MAX_ELEMENTS} elements")
    return count


def u32(v: int) -> bytes:
    return struct.pack("<I", int(v))


def f32(v) -> bytes:
    return np.asarray(v, dtype="<f4").tobytes()


def floats(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def u32s(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<u4").tobytes()


def read_file(path) -> Reader:
    with open(path, "rb") as fh:
        return Reader(fh.read(), path)


def write_file(path, chunks) -> None:
    with open(path, "wb") as fh:
        for c in chunks:
            fh.write(c)
