"""Bit-exact binary formats for weights, quantized models, and token streams.

All three formats are little-endian with a 4-byte magic and a u32
version. Loads validate sizes before reading payloads and fail closed
with a :class:`FormatError` carrying a stable ``code``.

MBQW (full-precision weights), version 1::

    "MBQW" | u32 version | u32 tensor_count
    per tensor: u32 name_len | name utf-8 | u32 ndim | u32 dim[ndim]
                | f32 data[prod(dims)]  (row-major)

MBQQ (row-wise quantized tensors), version 1::

    "MBQQ" | u32 version | u32 tensor_count
    per tensor: u32 name_len | name utf-8 | u8 k | u32 m | u32 n
                | f32 coeffs[m*k]  (row-major, per row descending >= 0)
                | k bitplanes, each m rows of ceil(n/64) u64 words
                  (LSB-first, bit 1 = +1, padding bits zero)

MBQT (token ids), version 1::

    "MBQT" | u32 version | u64 count | u32 id[count]
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .quantize import QuantizedMatrix
from .bitpack import words_needed

FORMAT_VERSION = 1

_MAGIC_WEIGHTS = b"MBQW"
_MAGIC_QUANTIZED = b"MBQQ"
_MAGIC_TOKENS = b"MBQT"


class FormatError(ValueError):
    """Malformed or mismatched file content; ``code`` names the failure."""

    def __init__(self, message: str, code: str):
        super().__init__(message)
        self.code = code


@dataclass
class WeightContainer:
    """Named float32 tensors, insertion-ordered."""

    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def add(self, name: str, tensor) -> "WeightContainer":
        if name in self.tensors:
            raise FormatError(f"duplicate tensor name {name!r}", "duplicate_name")
        self.tensors[name] = np.ascontiguousarray(tensor, dtype=np.float32)
        return self


@dataclass
class QuantizedContainer:
    """Named row-wise quantized tensors, insertion-ordered."""

    tensors: dict[str, QuantizedMatrix] = field(default_factory=dict)

    def add(self, name: str, tensor: QuantizedMatrix) -> "QuantizedContainer":
        if name in self.tensors:
            raise FormatError(f"duplicate tensor name {name!r}", "duplicate_name")
        self.tensors[name] = tensor
        return self


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, nbytes: int) -> bytes:
        if nbytes < 0 or self.pos + nbytes > len(self.data):
            raise FormatError("truncated payload", "truncated")
        out = self.data[self.pos : self.pos + nbytes]
        self.pos += nbytes
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def expect_end(self) -> None:
        if self.pos != len(self.data):
            raise FormatError("trailing bytes after payload", "truncated")


def _check_header(r: _Reader, magic: bytes) -> None:
    got = r.take(4)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}", "bad_magic")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", "bad_version")


def _read_name(r: _Reader) -> str:
    return r.take(r.u32()).decode("utf-8")


def _name_bytes(name: str) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


# ----------------------------------------------------------------------
# Full-precision weights
# ----------------------------------------------------------------------


def save_weights(path, container: WeightContainer) -> None:
    parts = [_MAGIC_WEIGHTS, struct.pack("<II", FORMAT_VERSION, len(container.tensors))]
    for name, tensor in container.tensors.items():
        data = np.ascontiguousarray(tensor, dtype="<f4")
        parts.append(_name_bytes(name))
        parts.append(struct.pack("<I", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_weights(path) -> WeightContainer:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    _check_header(r, _MAGIC_WEIGHTS)
    count = r.u32()
    out = WeightContainer()
    for _ in range(count):
        name = _read_name(r)
        if name in out.tensors:
            raise FormatError(f"duplicate tensor name {name!r}", "duplicate_name")
        ndim = r.u32()
        if ndim > 32:
            raise FormatError(f"implausible rank {ndim}", "truncated")
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape)
        out.tensors[name] = data.copy()
    r.expect_end()
    return out


# ----------------------------------------------------------------------
# Quantized tensors
# ----------------------------------------------------------------------


def save_quantized(path, container: QuantizedContainer) -> None:
    parts = [
        _MAGIC_QUANTIZED,
        struct.pack("<II", FORMAT_VERSION, len(container.tensors)),
    ]
    for name, q in container.tensors.items():
        parts.append(_name_bytes(name))
        parts.append(struct.pack("<BII", q.k, q.m, q.n))
        parts.append(np.ascontiguousarray(q.row_alphas, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(q.plane_words, dtype="<u8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_quantized(path) -> QuantizedContainer:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    _check_header(r, _MAGIC_QUANTIZED)
    count = r.u32()
    out = QuantizedContainer()
    for _ in range(count):
        name = _read_name(r)
        if name in out.tensors:
            raise FormatError(f"duplicate tensor name {name!r}", "duplicate_name")
        k = r.u8()
        m = r.u32()
        n = r.u32()
        if k < 1 or m < 1 or n < 1:
            raise FormatError(f"bad tensor header k={k} m={m} n={n}", "truncated")
        coeffs = np.frombuffer(r.take(4 * m * k), dtype="<f4").reshape(m, k)
        nwords = words_needed(n)
        words = np.frombuffer(r.take(8 * k * m * nwords), dtype="<u8")
        words = words.reshape(k, m, nwords)
        if np.any(coeffs < 0) or np.any(np.diff(coeffs, axis=1) > 0):
            raise FormatError(
                f"non-canonical model: tensor {name!r} coefficients", "non_canonical"
            )
        pad = nwords * 64 - n
        if pad and np.any(words[:, :, -1] >> np.uint64(n % 64)):
            raise FormatError(
                f"corrupt bitplane: tensor {name!r} has nonzero padding",
                "corrupt_padding",
            )
        out.tensors[name] = QuantizedMatrix(
            m, n, k, coeffs.copy(), words.copy()
        )
    r.expect_end()
    return out


# ----------------------------------------------------------------------
# Token streams
# ----------------------------------------------------------------------


def save_tokens(path, ids) -> None:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ValueError("token ids must be a 1-d sequence")
    if ids.size and (ids.min() < 0 or ids.max() > 0xFFFFFFFF):
        raise FormatError("token id out of u32 range", "id_overflow")
    with open(path, "wb") as fh:
        fh.write(_MAGIC_TOKENS)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, ids.size))
        fh.write(ids.astype("<u4").tobytes())


def load_tokens(path) -> np.ndarray:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    _check_header(r, _MAGIC_TOKENS)
    count = r.u64()
    ids = np.frombuffer(r.take(4 * count), dtype="<u4").astype(np.int64)
    r.expect_end()
    return ids


def load_tokens_text(path) -> np.ndarray:
    """Whitespace-separated decimal ids."""
    with open(path, "r", encoding="utf-8") as fh:
        fields = fh.read().split()
    try:
        ids = np.array([int(f) for f in fields], dtype=np.int64)
    except ValueError as exc:
        raise FormatError(f"bad token text: {exc}", "bad_token") from None
    if ids.size and (ids.min() < 0 or ids.max() > 0xFFFFFFFF):
        raise FormatError("token id out of u32 range", "id_overflow")
    return ids
