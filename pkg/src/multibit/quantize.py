"""Scalar and vector quantizers that learn {-1,+1} codes with real coefficients.

The workhorse approximates a real vector w by sum_i alphas[i] * planes[i]
with planes in {-1,+1}^n, minimizing the squared error. Coefficients and
codes are optimized by alternating exact block updates: a small
least-squares solve for the coefficients, then per-entry nearest-code
assignment over the 2^k reconstruction values via binary search.

All quantizers are positively homogeneous and operate row-wise on
matrices; the batched implementations reproduce the single-vector
results bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .bitpack import PackedBitPlane, pack_rows, unpack_rows, words_needed

try:
    from . import _kernels

    _HAS_KERNELS = True
except ImportError:  # pragma: no cover - numba present in normal installs
    _HAS_KERNELS = False

MAX_CODEBOOK_BITS = 16
DEFAULT_CYCLES = 2  # two alternating cycles reach high precision in practice
_KERNEL_MAX_BITS = 8  # larger codebooks fall back to the numpy engine

_RIDGE_SCALE = 1e-8  # singular-Gram fallback: solve (G + n*_RIDGE_SCALE*I)


# ----------------------------------------------------------------------
# Domain types
# ----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MultiBitCode:
    """k coefficients plus k packed sign planes approximating one vector.

    Canonical form: alphas descending and nonnegative (negative
    least-squares coefficients are absorbed by flipping the plane).
    """

    alphas: np.ndarray
    planes: tuple[PackedBitPlane, ...]
    used_ridge: bool = False

    def __post_init__(self):
        alphas = np.ascontiguousarray(self.alphas, dtype=np.float64)
        alphas.setflags(write=False)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "planes", tuple(self.planes))
        if alphas.ndim != 1 or len(alphas) != len(self.planes):
            raise ValueError("need one coefficient per plane")
        if len(self.planes) == 0:
            raise ValueError("need at least one plane")
        if np.any(alphas < 0) or np.any(np.diff(alphas) > 0):
            raise ValueError("coefficients must be nonnegative and descending")
        n = self.planes[0].n
        if any(p.n != n for p in self.planes):
            raise ValueError("planes must share one length")

    @classmethod
    def _trusted(cls, alphas: np.ndarray, planes: tuple, used_ridge: bool
                 ) -> "MultiBitCode":
        # fast path for canonical kernel output; skips re-validation
        self = object.__new__(cls)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "planes", planes)
        object.__setattr__(self, "used_ridge", used_ridge)
        return self

    @property
    def k(self) -> int:
        return len(self.planes)

    @property
    def n(self) -> int:
        return self.planes[0].n

    def signs(self) -> np.ndarray:
        """(k, n) int8 matrix of the unpacked planes."""
        return np.stack([p.unpack() for p in self.planes])

    def reconstruct(self) -> np.ndarray:
        out = np.zeros(self.n, dtype=np.float64)
        for a, p in zip(self.alphas, self.planes):
            out += a * p.unpack()
        return out


@dataclass(frozen=True, eq=False)
class Codebook:
    """All 2^k reconstruction values in ascending order.

    ``patterns[j]`` holds the k signs producing ``values[j]``; ties keep
    lexicographic pattern order (- before +).
    """

    values: np.ndarray
    patterns: np.ndarray

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        patterns = np.ascontiguousarray(self.patterns, dtype=np.int8)
        for arr in (values, patterns):
            arr.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "patterns", patterns)
        if values.ndim != 1 or patterns.ndim != 2:
            raise ValueError("bad codebook shapes")
        if len(values) != len(patterns) or len(values) != 2 ** patterns.shape[1]:
            raise ValueError("codebook must enumerate all 2^k patterns")
        if np.any(np.diff(values) < 0):
            raise ValueError("codebook values must ascend")

    @property
    def k(self) -> int:
        return self.patterns.shape[1]


@dataclass(frozen=True, eq=False)
class TernaryCode:
    """One nonnegative coefficient times a {-1,0,+1} vector."""

    alpha: float
    trits: np.ndarray

    def __post_init__(self):
        trits = np.ascontiguousarray(self.trits, dtype=np.int8)
        trits.setflags(write=False)
        object.__setattr__(self, "trits", trits)
        object.__setattr__(self, "alpha", float(self.alpha))
        if self.alpha < 0:
            raise ValueError("coefficient must be nonnegative")
        if trits.ndim != 1 or not np.all(np.abs(trits) <= 1):
            raise ValueError("entries must be in {-1, 0, +1}")

    @property
    def n(self) -> int:
        return len(self.trits)

    def reconstruct(self) -> np.ndarray:
        return self.alpha * self.trits.astype(np.float64)


@dataclass(frozen=True, eq=False)
class QuantizedMatrix:
    """A matrix quantized row by row.

    Per-row coefficients are float32 (matching the serialized format);
    plane_words[i] packs plane i of every row as (m, ceil(n/64)) uint64.
    """

    m: int
    n: int
    k: int
    row_alphas: np.ndarray
    plane_words: np.ndarray
    used_ridge: bool = False

    def __post_init__(self):
        alphas = np.ascontiguousarray(self.row_alphas, dtype=np.float32)
        words = np.ascontiguousarray(self.plane_words, dtype=np.uint64)
        if alphas.shape != (self.m, self.k):
            raise ValueError("row_alphas must be (m, k)")
        if words.shape != (self.k, self.m, words_needed(self.n)):
            raise ValueError("plane_words must be (k, m, ceil(n/64))")
        if np.any(alphas < 0) or np.any(np.diff(alphas, axis=1) > 0):
            raise ValueError("row coefficients must be nonnegative and descending")
        pad = words_needed(self.n) * 64 - self.n
        if pad and np.any(words[:, :, -1] >> np.uint64(self.n % 64)):
            raise ValueError("corrupt bitplane: nonzero padding bits")
        for arr in (alphas, words):
            arr.setflags(write=False)
        object.__setattr__(self, "row_alphas", alphas)
        object.__setattr__(self, "plane_words", words)

    def row_code(self, r: int) -> MultiBitCode:
        planes = tuple(
            PackedBitPlane(self.n, self.plane_words[i, r]) for i in range(self.k)
        )
        return MultiBitCode(self.row_alphas[r].astype(np.float64), planes,
                            used_ridge=self.used_ridge)

    def reconstruct(self) -> np.ndarray:
        out = np.zeros((self.m, self.n), dtype=np.float64)
        for i in range(self.k):
            signs = unpack_rows(self.plane_words[i], self.n)
            out += self.row_alphas[:, i, None].astype(np.float64) * signs
        return out


# ----------------------------------------------------------------------
# Input validation helpers
# ----------------------------------------------------------------------


def _as_vector(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("empty input")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")
    return x


def _as_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.size == 0:
        raise ValueError("empty input")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")
    return x


def _check_bits(k: int, limit: int = MAX_CODEBOOK_BITS) -> int:
    k = int(k)
    if k < 1:
        raise ValueError("bit count must be >= 1")
    if k > limit:
        raise ValueError("codebook too large")
    return k


# ----------------------------------------------------------------------
# Rule-based quantizers
# ----------------------------------------------------------------------


def _round_half_away(t: np.ndarray) -> np.ndarray:
    # np.round ties to even; the convention here is half away from zero
    return np.copysign(np.floor(np.abs(t) + 0.5), t)


def uniform_quantize(x, k: int, normalize: bool = True):
    """Snap entries onto 2^k evenly spaced levels of [-scale, scale].

    ``scale`` is the max-abs of the input (1 if all zeros); pass
    ``normalize=False`` to evaluate the raw [-1, 1] rule with scale 1.
    Rounding ties go half away from zero. Returns (quantized, scale).
    """
    x = _as_vector(x)
    k = _check_bits(k, limit=62)
    scale = float(np.max(np.abs(x))) if normalize else 1.0
    if scale == 0.0:
        scale = 1.0
    levels = float(2**k - 1)
    j = _round_half_away(levels * (x / scale + 1.0) / 2.0)
    np.clip(j, 0.0, levels, out=j)
    return scale * 2.0 * (j / levels - 0.5), scale


def balanced_quantize(x, k: int) -> np.ndarray:
    """Quantize via 2^k equal-mass intervals of the sample distribution.

    Entries are ranked, split into 2^k near-equal chunks, and each chunk's
    center (midpoint of its smallest and largest member) is mapped to the
    matching uniform code by a least-squares affine fit; entries are
    replaced by the inverse-affine image of their chunk's code.
    """
    x = _as_vector(x)
    k = _check_bits(k)
    return _balanced_rows(x[None, :], k)[0]


def _balanced_rows(X: np.ndarray, k: int) -> np.ndarray:
    m, n = X.shape
    nlevels = 2**k
    if n < nlevels:
        raise ValueError(f"too few samples for 2^{k} intervals")
    order = np.argsort(X, axis=1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(n)[None, :].repeat(m, 0), axis=1)
    chunk = (ranks * nlevels) // n
    xs = np.take_along_axis(X, order, axis=1)
    starts = np.array([-(-c * n // nlevels) for c in range(nlevels)])
    ends = np.append(starts[1:], n) - 1
    centers = (xs[:, starts] + xs[:, ends]) / 2.0
    codes = 2.0 * (np.arange(nlevels) / (nlevels - 1.0) - 0.5)
    cbar = centers.mean(axis=1, keepdims=True)
    ubar = codes.mean()
    var = ((centers - cbar) ** 2).sum(axis=1)
    cov = ((centers - cbar) * (codes - ubar)[None, :]).sum(axis=1)
    degenerate = (var <= 0.0) | (cov == 0.0)
    a = np.where(degenerate, 1.0, cov / np.where(degenerate, 1.0, var))
    b = ubar - a * cbar[:, 0]
    levels = (codes[None, :] - b[:, None]) / a[:, None]
    levels[degenerate] = cbar[degenerate]  # constant data maps to its center
    return np.take_along_axis(levels, chunk, axis=1)


def ternary_quantize(w) -> TernaryCode:
    """Zero out small entries, binarize the rest, refit the coefficient.

    The threshold is 0.7 * mean-abs; the coefficient is the least-squares
    fit of the surviving {-1,+1} pattern to w.
    """
    w = _as_vector(w)
    tau = 0.7 * np.sum(np.abs(w)) / w.size
    trits = np.where(np.abs(w) < tau, 0.0, np.where(w >= 0.0, 1.0, -1.0))
    nnz = float(trits @ trits)
    alpha = float(trits @ w) / nnz if nnz > 0.0 else 0.0
    return TernaryCode(alpha, trits.astype(np.int8))


def relative_mse(w, w_hat) -> float:
    """Squared approximation error over the squared norm of the original."""
    w = np.asarray(w, dtype=np.float64)
    w_hat = np.asarray(w_hat, dtype=np.float64)
    if w.shape != w_hat.shape:
        raise ValueError("shape mismatch")
    denom = float(np.sum(w * w))
    if denom == 0.0:
        raise ValueError("zero-norm reference")
    return float(np.sum((w - w_hat) ** 2)) / denom


# ----------------------------------------------------------------------
# Codebooks and binary-search assignment
# ----------------------------------------------------------------------


@lru_cache(maxsize=None)
def _pattern_matrix(k: int) -> np.ndarray:
    """(2^k, k) sign patterns in lexicographic order (- before +)."""
    j = np.arange(2**k, dtype=np.int64)
    bits = (j[:, None] >> np.arange(k - 1, -1, -1)[None, :]) & 1
    patterns = (2.0 * bits - 1.0).astype(np.float64)
    patterns.setflags(write=False)
    return patterns


def build_codebook(alphas) -> Codebook:
    """Enumerate the 2^k reconstruction values of canonical coefficients."""
    alphas = np.asarray(alphas, dtype=np.float64)
    if alphas.ndim != 1 or alphas.size == 0:
        raise ValueError("empty input")
    k = _check_bits(alphas.size)
    if np.any(alphas < 0) or np.any(np.diff(alphas) > 0):
        raise ValueError("coefficients must be nonnegative and descending")
    patterns = _pattern_matrix(k)
    values = patterns @ alphas
    order = np.argsort(values, kind="stable")
    return Codebook(values[order], patterns[order].astype(np.int8))


def bst_assign(w: float, codebook: Codebook) -> int:
    """Index of a nearest codebook value, by recursive halving.

    Exactly k comparisons; a value on an interval midpoint takes the
    upper half.
    """
    values = codebook.values
    size = len(values)
    if size & (size - 1):
        raise ValueError("codebook length must be a power of two")
    lo = 0
    while size > 1:
        half = size // 2
        mid = lo + half - 1
        if w >= (values[mid] + values[mid + 1]) / 2.0:
            lo += half
        size = half
    return lo


def assign_codes(w, codebook: Codebook) -> np.ndarray:
    """Per-entry nearest-code assignment; returns (k, n) signs in {-1,+1}.

    Equivalent to running :func:`bst_assign` on every entry: for sorted
    values the halving search lands on the count of interval boundaries
    <= w, which is a single sorted lookup.
    """
    w = _as_vector(w)
    values = codebook.values
    if len(values) & (len(values) - 1):
        raise ValueError("codebook length must be a power of two")
    boundaries = (values[:-1] + values[1:]) / 2.0
    idx = np.searchsorted(boundaries, w, side="right")
    return np.ascontiguousarray(codebook.patterns[idx].T)


def _assign_rows(W: np.ndarray, values: np.ndarray, patterns: np.ndarray,
                 order: np.ndarray) -> np.ndarray:
    """Batched nearest-code assignment with one codebook per row.

    values: (m, 2^k) ascending per row; patterns: shared (2^k, k) in
    lexicographic order; order: (m, 2^k) the per-row sort permutation.
    Returns (m, k, n) float64 signs.
    """
    m, n = W.shape
    boundaries = (values[:, :-1] + values[:, 1:]) * 0.5
    if boundaries.shape[1] > 127:
        idx = np.empty((m, n), dtype=np.int64)
        for r in range(m):
            idx[r] = np.searchsorted(boundaries[r], W[r], side="right")
    else:
        idx = np.zeros((m, n), dtype=np.int64)
        for b in range(boundaries.shape[1]):
            idx += W >= boundaries[:, b, None]
    sorted_patterns = patterns[order]  # (m, 2^k, k)
    signs = np.take_along_axis(sorted_patterns, idx[:, :, None], axis=1)
    return np.ascontiguousarray(signs.transpose(0, 2, 1))


# ----------------------------------------------------------------------
# Learned quantizers: greedy, refined greedy, alternating
# ----------------------------------------------------------------------


def _sign_rows(R: np.ndarray) -> np.ndarray:
    # sign with the tie at zero resolved to +1
    return np.where(R >= 0.0, 1.0, -1.0)


def _refit_rows(signs: np.ndarray, W: np.ndarray):
    """Least-squares coefficients per row given fixed sign planes.

    Solves the k x k normal equations row by row; a singular Gram matrix
    (integer-valued, so detected exactly) falls back to a ridge solve.
    Returns (coeffs (m, k), ridge_used (m,) bool).
    """
    m, k, n = signs.shape
    rhs = (signs @ W[:, :, None])[..., 0]
    if k == 1:
        return rhs / float(n), np.zeros(m, dtype=bool)
    gram = signs @ signs.transpose(0, 2, 1)
    det = np.linalg.det(gram)
    ridge = np.abs(det) < 0.5
    if np.any(ridge):
        gram = gram.copy()
        lam = _RIDGE_SCALE * n
        gram[ridge] += lam * np.eye(k)
    if k == 2:
        a, b, d = gram[:, 0, 0], gram[:, 0, 1], gram[:, 1, 1]
        inv_det = 1.0 / (a * d - b * b)
        c0 = (d * rhs[:, 0] - b * rhs[:, 1]) * inv_det
        c1 = (a * rhs[:, 1] - b * rhs[:, 0]) * inv_det
        return np.stack([c0, c1], axis=1), ridge
    return np.linalg.solve(gram, rhs[:, :, None])[:, :, 0], ridge


def _canonicalize_rows(alphas: np.ndarray, signs: np.ndarray):
    """Flip negative coefficients into the planes, sort descending (stable)."""
    neg = alphas < 0.0
    if np.any(neg):
        alphas = np.abs(alphas)
        signs = signs * np.where(neg, -1.0, 1.0)[:, :, None]
    order = np.argsort(-alphas, axis=1, kind="stable")
    if np.any(order != np.arange(alphas.shape[1])[None, :]):
        alphas = np.take_along_axis(alphas, order, axis=1)
        signs = np.take_along_axis(signs, order[:, :, None], axis=1)
    return alphas, signs


def _residual_sq_rows(W: np.ndarray, alphas: np.ndarray, signs: np.ndarray):
    recon = np.einsum("mk,mkn->mn", alphas, signs)
    diff = W - recon
    return np.einsum("mn,mn->m", diff, diff)


def _greedy_rows_np(W: np.ndarray, k: int, refined: bool):
    """Sequential residual binarization, optionally refitting each round."""
    m, n = W.shape
    signs = np.empty((m, k, n), dtype=np.float64)
    alphas = np.zeros((m, k), dtype=np.float64)
    residual = W.copy()
    ridge = np.zeros(m, dtype=bool)
    for i in range(k):
        signs[:, i, :] = _sign_rows(residual)
        alphas[:, i] = np.abs(residual).mean(axis=1)
        if refined:
            fit, r = _refit_rows(signs[:, : i + 1], W)
            alphas[:, : i + 1] = fit
            ridge |= r
            recon = np.einsum("mk,mkn->mn", alphas[:, : i + 1], signs[:, : i + 1])
            residual = W - recon
        else:
            residual -= alphas[:, i, None] * signs[:, i, :]
    alphas, signs = _canonicalize_rows(alphas, signs)
    return alphas, signs, ridge


def _alternating_rows_np(W: np.ndarray, k: int, cycles: int, trace=None):
    """Greedy init, then cycles of exact coefficient/code block updates."""
    alphas, signs, ridge = _greedy_rows_np(W, k, refined=False)
    if trace is not None:
        trace.append(("init", _residual_sq_rows(W, alphas, signs)))
    patterns = _pattern_matrix(k)
    for _ in range(cycles):
        alphas, r = _refit_rows(signs, W)
        ridge |= r
        alphas, signs = _canonicalize_rows(alphas, signs)
        if trace is not None:
            trace.append(("refit", _residual_sq_rows(W, alphas, signs)))
        values = alphas @ patterns.T
        order = np.argsort(values, axis=1, kind="stable")
        values = np.take_along_axis(values, order, axis=1)
        signs = _assign_rows(W, values, patterns, order)
        if trace is not None:
            trace.append(("assign", _residual_sq_rows(W, alphas, signs)))
    return alphas, signs, ridge


def _pack_rows_3d(signs: np.ndarray) -> np.ndarray:
    """(m, k, n) signs to (m, k, words) uint64."""
    m, k, n = signs.shape
    return pack_rows(signs.reshape(m * k, n)).reshape(m, k, -1)


def _reconstruct_rows(alphas: np.ndarray, words: np.ndarray, n: int) -> np.ndarray:
    """Row reconstructions from (m, k) coefficients and (m, k, words) planes."""
    m, k = alphas.shape
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(k):
        out += alphas[:, i, None] * unpack_rows(words[:, i], n)
    return out


def _run_rows_kernel(W: np.ndarray, k: int, cycles: int, mode: int, trace):
    m, n = W.shape
    alphas = np.empty((m, k), dtype=np.float64)
    words = np.empty((m, k, words_needed(n)), dtype=np.uint64)
    ridge = np.empty(m, dtype=np.bool_)
    want_trace = trace is not None and mode == _kernels.MODE_ALTERNATING
    slots = 1 + 2 * cycles if want_trace else 0
    tbuf = np.empty((m, slots), dtype=np.float64)
    _kernels.quantize_rows(np.ascontiguousarray(W), k, cycles, mode,
                           alphas, words, ridge, tbuf, want_trace)
    if want_trace:
        trace.append(("init", tbuf[:, 0].copy()))
        for c in range(cycles):
            trace.append(("refit", tbuf[:, 1 + 2 * c].copy()))
            trace.append(("assign", tbuf[:, 2 + 2 * c].copy()))
    return alphas, words, ridge


def _greedy_rows(W: np.ndarray, k: int, refined: bool):
    """Greedy or refined-greedy rows; returns (alphas, packed planes, ridge)."""
    if _HAS_KERNELS and k <= _KERNEL_MAX_BITS:
        mode = _kernels.MODE_REFINED if refined else _kernels.MODE_GREEDY
        return _run_rows_kernel(W, k, 0, mode, None)
    alphas, signs, ridge = _greedy_rows_np(W, k, refined)
    return alphas, _pack_rows_3d(signs), ridge


def _alternating_rows(W: np.ndarray, k: int, cycles: int, trace=None):
    """Alternating rows; returns (alphas, packed planes, ridge)."""
    if _HAS_KERNELS and k <= _KERNEL_MAX_BITS:
        return _run_rows_kernel(W, k, cycles, _kernels.MODE_ALTERNATING, trace)
    alphas, signs, ridge = _alternating_rows_np(W, k, cycles, trace)
    return alphas, _pack_rows_3d(signs), ridge


def _code_from_row(alphas: np.ndarray, words: np.ndarray, n: int,
                   ridge: bool) -> MultiBitCode:
    planes = tuple(PackedBitPlane._trusted(n, w) for w in words)
    return MultiBitCode._trusted(alphas, planes, ridge)


def greedy_quantize(w, k: int) -> MultiBitCode:
    """k rounds of residual binarization (mean-abs coefficient, sign code)."""
    w = _as_vector(w)
    k = _check_bits(k)
    alphas, words, ridge = _greedy_rows(w[None, :], k, refined=False)
    return _code_from_row(alphas[0], words[0], w.size, bool(ridge[0]))


def refined_greedy_quantize(w, k: int) -> MultiBitCode:
    """Greedy rounds with a least-squares coefficient refit after each one.

    Codes from earlier rounds stay fixed; only the coefficients move.
    """
    w = _as_vector(w)
    k = _check_bits(k)
    alphas, words, ridge = _greedy_rows(w[None, :], k, refined=True)
    return _code_from_row(alphas[0], words[0], w.size, bool(ridge[0]))


def refit_coefficients(planes, w):
    """Least-squares coefficients for fixed sign planes.

    ``planes`` is a (k, n) {-1,+1} array or a sequence of
    :class:`PackedBitPlane`. Returns (coefficients, ridge_used); the
    coefficients are the raw solution, possibly negative or unordered.
    """
    if not isinstance(planes, np.ndarray):
        seq = list(planes)
        if seq and isinstance(seq[0], PackedBitPlane):
            planes = np.stack([p.unpack() for p in seq])
        else:
            planes = np.asarray(seq)
    planes = planes.astype(np.float64)
    if planes.ndim != 2 or not np.all(np.abs(planes) == 1):
        raise ValueError("planes must be a (k, n) matrix over {-1,+1}")
    w = _as_vector(w)
    k, n = planes.shape
    if w.size != n:
        raise ValueError("length mismatch")
    if k > n:
        raise ValueError("more planes than entries")
    coeffs, ridge = _refit_rows(planes[None, :, :], w[None, :])
    return coeffs[0], bool(ridge[0])


def alternating_quantize(w, k: int, cycles: int = DEFAULT_CYCLES,
                         trace: list | None = None) -> MultiBitCode:
    """Greedy initialization plus ``cycles`` alternating refinement cycles.

    Each cycle refits the coefficients by least squares, rebuilds the
    codebook, and reassigns every entry to its nearest code; the residual
    never increases at either half-step. ``cycles=0`` returns the greedy
    solution. Pass a list as ``trace`` to collect (stage, residual^2)
    pairs after every half-step.
    """
    w = _as_vector(w)
    k = _check_bits(k)
    if cycles < 0:
        raise ValueError("cycle count must be >= 0")
    row_trace = [] if trace is not None else None
    alphas, words, ridge = _alternating_rows(w[None, :], k, cycles, row_trace)
    if trace is not None:
        trace.extend((stage, float(res[0])) for stage, res in row_trace)
    return _code_from_row(alphas[0], words[0], w.size, bool(ridge[0]))


# ----------------------------------------------------------------------
# Row-wise matrix quantization
# ----------------------------------------------------------------------

_METHODS = ("alternating", "greedy", "refined", "uniform", "ternary")


def _uniform_rows_as_codes(W: np.ndarray, k: int):
    """Exact multi-bit encoding of per-row uniform quantization.

    The 2^k evenly spaced levels of [-s, s] are the sums +/-a_1 ... +/-a_k
    with binary-weighted a_i = s * 2^(k-1-i) / (2^k - 1), so the uniform
    rule fits the packed representation losslessly.
    """
    m, n = W.shape
    scales = np.abs(W).max(axis=1)
    scales[scales == 0.0] = 1.0
    levels = float(2**k - 1)
    j = _round_half_away(levels * (W / scales[:, None] + 1.0) / 2.0)
    np.clip(j, 0.0, levels, out=j)
    weights = 2.0 ** np.arange(k - 1, -1, -1)
    alphas = scales[:, None] * weights[None, :] / levels
    bits = (j.astype(np.int64)[:, None, :] >> np.arange(k - 1, -1, -1)[None, :, None]) & 1
    signs = 2.0 * bits - 1.0
    return alphas, signs


def _ternary_rows_as_codes(W: np.ndarray):
    """Ternary codes as k=2 equal-coefficient planes (0 = opposing signs)."""
    m, n = W.shape
    tau = 0.7 * np.abs(W).sum(axis=1) / n
    trits = np.where(np.abs(W) < tau[:, None], 0.0, _sign_rows(W))
    nnz = np.einsum("mn,mn->m", trits, trits)
    dots = np.einsum("mn,mn->m", trits, W)
    alpha = np.where(nnz > 0.0, dots / np.where(nnz > 0.0, nnz, 1.0), 0.0)
    half = alpha / 2.0
    alphas = np.stack([half, half], axis=1)
    plane1 = np.where(trits == 0.0, 1.0, trits)
    plane2 = np.where(trits == 0.0, -1.0, trits)
    return alphas, np.stack([plane1, plane2], axis=1)


def quantize_matrix_rowwise(W, k: int, cycles: int = DEFAULT_CYCLES,
                            method: str = "alternating",
                            block_rows: int | None = None) -> QuantizedMatrix:
    """Quantize each row independently; rows never interact.

    Rows are processed in blocks for memory locality, with results
    identical to one-row-at-a-time processing.
    """
    W = _as_matrix(W)
    if method not in _METHODS:
        raise ValueError(f"unknown method {method!r}")
    k = _check_bits(k) if method != "ternary" else 2
    m, n = W.shape
    if block_rows is None:
        block_rows = max(1, int(4_000_000 // max(n * max(k, 1), 1)))
    nwords = words_needed(n)
    row_alphas = np.empty((m, k), dtype=np.float32)
    plane_words = np.empty((k, m, nwords), dtype=np.uint64)
    ridge_any = False
    for s in range(0, m, block_rows):
        e = min(s + block_rows, m)
        block = W[s:e]
        try:
            if method == "alternating":
                alphas, words, ridge = _alternating_rows(block, k, cycles)
                ridge_any |= bool(ridge.any())
            elif method == "greedy":
                alphas, words, _ = _greedy_rows(block, k, refined=False)
            elif method == "refined":
                alphas, words, ridge = _greedy_rows(block, k, refined=True)
                ridge_any |= bool(ridge.any())
            elif method == "uniform":
                alphas, signs = _uniform_rows_as_codes(block, k)
                words = _pack_rows_3d(signs)
            else:
                alphas, signs = _ternary_rows_as_codes(block)
                words = _pack_rows_3d(signs)
        except Exception as exc:
            raise type(exc)(f"rows {s}..{e - 1}: {exc}") from exc
        row_alphas[s:e] = alphas
        for i in range(k):
            plane_words[i, s:e] = words[:, i]
    return QuantizedMatrix(m, n, k, row_alphas, plane_words, used_ridge=ridge_any)
