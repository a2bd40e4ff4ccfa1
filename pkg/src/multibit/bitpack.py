"""Bit-packed {-1,+1} vectors and XNOR-popcount linear algebra.

A sign vector is stored one bit per entry in little-endian uint64 words
(bit 1 encodes +1, bit 0 encodes -1). Dot products between packed vectors
reduce to XNOR plus a population count, which is where the speedup of
quantized matrix-vector products comes from.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .quantize import MultiBitCode, QuantizedMatrix

try:
    from numba import njit

    _HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba present in normal installs
    _HAS_NUMBA = False

WORD_BITS = 64


def words_needed(n: int) -> int:
    return (n + WORD_BITS - 1) // WORD_BITS


if hasattr(np, "bitwise_count"):

    def popcount_words(words):
        """Per-word set-bit counts, same shape as the input."""
        return np.bitwise_count(words)

else:  # numpy < 2.0

    _POP8 = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)

    def popcount_words(words):
        """Per-word set-bit counts, same shape as the input."""
        counts = _POP8[words.view(np.uint8)]
        return counts.reshape(*words.shape, 8).sum(axis=-1, dtype=np.uint8)


@dataclass(frozen=True, eq=False)
class PackedBitPlane:
    """A length-n {-1,+1} vector packed LSB-first into 64-bit words.

    Entry j lives in bit ``j % 64`` of word ``j // 64``; padding bits past
    n are zero and never contribute to dot products.
    """

    n: int
    words: np.ndarray

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("empty input")
        words = np.ascontiguousarray(self.words, dtype=np.uint64)
        if words.ndim != 1 or words.shape[0] != words_needed(self.n):
            raise ValueError(
                f"expected {words_needed(self.n)} words for n={self.n}"
            )
        if self.pad_bits and (words[-1] >> np.uint64(self.n % WORD_BITS)):
            raise ValueError("corrupt bitplane: nonzero padding bits")
        words.setflags(write=False)
        object.__setattr__(self, "words", words)

    @property
    def pad_bits(self) -> int:
        return len(self.words) * WORD_BITS - self.n

    @classmethod
    def _trusted(cls, n: int, words: np.ndarray) -> "PackedBitPlane":
        # fast path for freshly packed kernel output; skips re-validation
        self = object.__new__(cls)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "words", words)
        return self

    def unpack(self) -> np.ndarray:
        """Back to a {-1,+1} int8 vector."""
        bits = np.unpackbits(
            self.words.view(np.uint8), count=self.n, bitorder="little"
        )
        return (bits.astype(np.int8) << 1) - 1


def pack_rows(signs: np.ndarray) -> np.ndarray:
    """Pack an (m, n) matrix of {-1,+1} rows into (m, words) uint64."""
    signs = np.asarray(signs)
    if signs.ndim != 2:
        raise ValueError("expected a 2-d sign array")
    m, n = signs.shape
    bits = (signs > 0).astype(np.uint8)
    packed = np.packbits(bits, axis=1, bitorder="little")
    nbytes = words_needed(n) * 8
    if packed.shape[1] != nbytes:
        full = np.zeros((m, nbytes), dtype=np.uint8)
        full[:, : packed.shape[1]] = packed
        packed = full
    return np.ascontiguousarray(packed).view(np.uint64)


def unpack_rows(words: np.ndarray, n: int) -> np.ndarray:
    """Inverse of :func:`pack_rows`; returns (m, n) int8 in {-1,+1}."""
    m = words.shape[0]
    bits = np.unpackbits(
        np.ascontiguousarray(words).view(np.uint8), axis=1, bitorder="little"
    )[:, :n]
    return (bits.astype(np.int8) << 1) - 1


def pack_signs(b) -> PackedBitPlane:
    """Pack a {-1,+1} vector into a :class:`PackedBitPlane`."""
    b = np.asarray(b)
    if b.ndim != 1:
        raise ValueError("expected a 1-d sign vector")
    if b.size == 0:
        raise ValueError("empty input")
    if not np.all(np.abs(b) == 1):
        raise ValueError("entries must be -1 or +1")
    return PackedBitPlane(b.size, pack_rows(b[None, :])[0])


# ----------------------------------------------------------------------
# XNOR-popcount core
# ----------------------------------------------------------------------
#
# The dot of two packed +/-1 vectors is 2*(popcount(XNOR) - pad) - n:
# XNOR counts agreements, the zeroed padding bits of both operands agree
# and are compensated once. The scalar routine below defines the
# semantics; the batched row kernel must match it bit for bit.


def xnor_popcount_dot(x: PackedBitPlane, y: PackedBitPlane) -> int:
    """Integer dot product of two packed {-1,+1} vectors."""
    if x.n != y.n:
        raise ValueError(f"length mismatch: {x.n} != {y.n}")
    agree = int(popcount_words(~(x.words ^ y.words)).sum())
    return 2 * (agree - x.pad_bits) - x.n


def _xnor_popcount_rows_np(mat: np.ndarray, vec: np.ndarray) -> np.ndarray:
    """popcount(XNOR) per row of a packed (rows, words) matrix."""
    rows = mat.shape[0]
    out = np.empty(rows, dtype=np.int64)
    step = 1024  # keep temporaries small enough for malloc reuse
    buf = np.empty((min(step, rows), mat.shape[1]), dtype=np.uint64)
    for s in range(0, rows, step):
        e = min(s + step, rows)
        b = buf[: e - s]
        np.bitwise_xor(mat[s:e], vec[None, :], out=b)
        np.invert(b, out=b)
        out[s:e] = popcount_words(b).sum(axis=1, dtype=np.int64)
    return out


if _HAS_NUMBA:
    _M1 = np.uint64(0x5555555555555555)
    _M2 = np.uint64(0x3333333333333333)
    _M4 = np.uint64(0x0F0F0F0F0F0F0F0F)
    _H01 = np.uint64(0x0101010101010101)
    _S1 = np.uint64(1)
    _S2 = np.uint64(2)
    _S4 = np.uint64(4)
    _S56 = np.uint64(56)

    @njit(cache=True)
    def _xnor_popcount_rows_nb(mat, vec, out):  # pragma: no cover - compiled
        rows, nwords = mat.shape
        for r in range(rows):
            acc = np.uint64(0)
            for c in range(nwords):
                x = ~(mat[r, c] ^ vec[c])
                x = x - ((x >> _S1) & _M1)
                x = (x & _M2) + ((x >> _S2) & _M2)
                x = (x + (x >> _S4)) & _M4
                acc += (x * _H01) >> _S56
            out[r] = acc

    def _xnor_popcount_rows(mat: np.ndarray, vec: np.ndarray) -> np.ndarray:
        out = np.empty(mat.shape[0], dtype=np.int64)
        _xnor_popcount_rows_nb(mat, vec, out)
        return out

else:
    _xnor_popcount_rows = _xnor_popcount_rows_np


# ----------------------------------------------------------------------
# Matrix-vector products
# ----------------------------------------------------------------------


def dense_gemv(W: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Reference dense matrix-vector product.

    Uses a BLAS-free einsum so the summation order per row is fixed and
    the result is identical regardless of thread count.
    """
    W = np.asarray(W)
    x = np.asarray(x)
    if W.ndim != 2 or x.ndim != 1 or W.shape[1] != x.shape[0]:
        raise ValueError(f"dimension mismatch: {W.shape} x {x.shape}")
    return np.einsum("ij,j->i", W, x)


def _check_gemv_args(W: "QuantizedMatrix", a: "MultiBitCode") -> None:
    if W.n != a.n:
        raise ValueError(f"dimension mismatch: matrix n={W.n}, vector n={a.n}")


def quantized_gemv(W: "QuantizedMatrix", a: "MultiBitCode") -> np.ndarray:
    """Quantized GEMV, one binary multiply per (weight, activation) plane pair.

    y[r] = sum_ij W.row_alphas[r, i] * a.alphas[j] * <W plane i row r, a plane j>
    with exact integer plane dots; coefficient products accumulate in
    float64, plane pairs summed in a fixed sequential order.
    """
    _check_gemv_args(W, a)
    pad = W.plane_words.shape[2] * WORD_BITS - W.n
    y = np.zeros(W.m, dtype=np.float64)
    for i in range(W.k):
        col = W.row_alphas[:, i].astype(np.float64)
        for j in range(a.k):
            agree = _xnor_popcount_rows(W.plane_words[i], a.planes[j].words)
            dots = 2 * (agree - pad) - W.n
            y += (float(a.alphas[j]) * col) * dots
    return y


def quantized_gemv_concat(W: "QuantizedMatrix", a: "MultiBitCode") -> np.ndarray:
    """Quantized GEMV over the row-stacked (k_w * m, n) binary matrix.

    Mathematically identical to :func:`quantized_gemv`; the k_w weight
    planes are concatenated so each activation plane runs one large
    binary multiply, then the k_w * k_h partial vectors are scaled and
    summed.
    """
    _check_gemv_args(W, a)
    kw, m, nwords = W.plane_words.shape
    pad = nwords * WORD_BITS - W.n
    wcat = W.plane_words.reshape(kw * m, nwords)
    agree = np.empty((a.k, kw * m), dtype=np.int64)
    for j, plane in enumerate(a.planes):
        agree[j] = _xnor_popcount_rows(wcat, plane.words)
    dots = (2 * (agree - pad) - W.n).reshape(a.k, kw, m)
    partial = np.tensordot(np.asarray(a.alphas, dtype=np.float64), dots, axes=(0, 0))
    partial *= W.row_alphas.T
    return partial.sum(axis=0)


# ----------------------------------------------------------------------
# Operation-count models
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class GemvCost:
    binary_ops: int
    nonbinary_ops: int

    def __post_init__(self):
        if self.binary_ops < 0 or self.nonbinary_ops < 0:
            raise ValueError("operation counts must be nonnegative")


def quantization_cost(n: int, k: int, cycles: int) -> GemvCost:
    """Operation counts for quantizing a length-n vector to k bits."""
    return GemvCost(2 * cycles * k * k * n, 2 * (cycles + 1) * k * n)


def theoretical_speedup(m: int, n: int, k_w: int, k_h: int) -> float:
    """Dense-to-quantized cost ratio for an (m, n) GEMV.

    Binary operations are discounted by the 32-bit word width; the
    non-binary terms cover on-line activation quantization (two cycles)
    and the final coefficient combination.
    """
    dense = 2.0 * m * n
    binary = 2.0 * k_w * k_h * m * n + 4.0 * k_h * k_h * n
    nonbinary = 6.0 * k_h * n + 2.0 * k_w * k_h * m
    return dense / (binary / 32.0 + nonbinary)
