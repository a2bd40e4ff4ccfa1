"""Compiled per-row quantization kernels.

The on-line activation path quantizes one vector inside every recurrent
step, so the alternating loop (greedy init, small least-squares refit,
codebook rebuild, per-entry binary-search assignment) runs here as one
compiled pass per row. Semantics mirror the numpy engine in
``quantize``; floating-point sums may differ in the last bits between
the two engines, but each engine is deterministic and row-independent.

Only rows with k <= 8 come through this module (the codebook sort is
quadratic in 2^k); larger k uses the numpy engine.
"""

from __future__ import annotations

import numpy as np
from numba import njit

MODE_GREEDY = 0
MODE_REFINED = 1
MODE_ALTERNATING = 2

_RIDGE_SCALE = 1e-8  # must match quantize._RIDGE_SCALE


@njit(cache=True, inline="always")
def _fill_normal(signs, w, G, rhs, k, n):  # pragma: no cover - compiled
    # Gram diagonal of +/-1 planes is exactly n
    for i in range(k):
        G[i, i] = n
        for j in range(i + 1, k):
            acc = 0.0
            for t in range(n):
                acc += signs[i, t] * signs[j, t]
            G[i, j] = acc
            G[j, i] = acc
        acc = 0.0
        for t in range(n):
            acc += signs[i, t] * w[t]
        rhs[i] = acc


@njit(cache=True, inline="always")
def _solve_normal(G, rhs, out, k):  # pragma: no cover - compiled
    """In-place Gaussian elimination with partial pivoting.

    Returns False when |det| < 0.5 (the Gram matrix is integer-valued,
    so that means exactly singular); ``out`` is untouched in that case.
    """
    det = 1.0
    for col in range(k):
        piv = col
        best = abs(G[col, col])
        for r in range(col + 1, k):
            cand = abs(G[r, col])
            if cand > best:
                best = cand
                piv = r
        if piv != col:
            for c in range(k):
                G[col, c], G[piv, c] = G[piv, c], G[col, c]
            rhs[col], rhs[piv] = rhs[piv], rhs[col]
            det = -det
        det *= G[col, col]
        if G[col, col] != 0.0:
            inv = 1.0 / G[col, col]
            for r in range(col + 1, k):
                f = G[r, col] * inv
                if f != 0.0:
                    for c in range(col, k):
                        G[r, c] -= f * G[col, c]
                    rhs[r] -= f * rhs[col]
    if abs(det) < 0.5:
        return False
    for col in range(k - 1, -1, -1):
        acc = rhs[col]
        for c in range(col + 1, k):
            acc -= G[col, c] * out[c]
        out[col] = acc / G[col, col]
    return True


@njit(cache=True, inline="always")
def _refit_row(signs, w, out, k, n, G, rhs):  # pragma: no cover - compiled
    """Least-squares coefficients into ``out``; True if ridge was needed."""
    _fill_normal(signs, w, G, rhs, k, n)
    if _solve_normal(G, rhs, out, k):
        return False
    _fill_normal(signs, w, G, rhs, k, n)
    lam = _RIDGE_SCALE * n
    for i in range(k):
        G[i, i] += lam
    _solve_normal(G, rhs, out, k)
    return True


@njit(cache=True, inline="always")
def _canonicalize_row(alphas, signs, k, n):  # pragma: no cover - compiled
    for i in range(k):
        if alphas[i] < 0.0:
            alphas[i] = -alphas[i]
            for t in range(n):
                signs[i, t] = -signs[i, t]
    # stable insertion sort, descending
    for i in range(1, k):
        j = i
        while j > 0 and alphas[j - 1] < alphas[j]:
            alphas[j - 1], alphas[j] = alphas[j], alphas[j - 1]
            for t in range(n):
                signs[j - 1, t], signs[j, t] = signs[j, t], signs[j - 1, t]
            j -= 1


@njit(cache=True, inline="always")
def _residual_sq_row(w, alphas, signs, k, n):  # pragma: no cover - compiled
    acc = 0.0
    for t in range(n):
        recon = 0.0
        for i in range(k):
            recon += alphas[i] * signs[i, t]
        d = w[t] - recon
        acc += d * d
    return acc


@njit(cache=True)
def quantize_rows(W, k, cycles, mode, alphas_out, words_out, ridge_out,
                  trace_out, want_trace):  # pragma: no cover - compiled
    """Greedy / refined-greedy / alternating quantization, row by row.

    Packs the final sign planes straight into ``words_out`` with shape
    (m, k, ceil(n/64)), LSB-first, bit 1 for +1. ``trace_out`` gets one
    slot for the post-init residual plus two per cycle when
    ``want_trace``.
    """
    m, n = W.shape
    ncodes = 1 << k
    nwords = words_out.shape[2]
    gbuf = np.empty((k, k), dtype=np.float64)
    rbuf = np.empty(k, dtype=np.float64)
    residual = np.empty(n, dtype=np.float64)
    signs = np.empty((k, n), dtype=np.float64)
    values = np.empty(ncodes, dtype=np.float64)
    codes = np.empty(ncodes, dtype=np.int64)
    one = np.uint64(1)
    for r in range(m):
        w = W[r]
        alphas = alphas_out[r]
        ridge = False
        for t in range(n):
            residual[t] = w[t]
        for i in range(k):
            acc = 0.0
            for t in range(n):
                s = 1.0 if residual[t] >= 0.0 else -1.0
                signs[i, t] = s
                acc += residual[t] if s > 0.0 else -residual[t]
            alphas[i] = acc / n
            if mode == MODE_REFINED:
                ridge |= _refit_row(signs[: i + 1], w, alphas[: i + 1],
                                    i + 1, n, gbuf[: i + 1, : i + 1],
                                    rbuf[: i + 1])
                for t in range(n):
                    recon = 0.0
                    for j in range(i + 1):
                        recon += alphas[j] * signs[j, t]
                    residual[t] = w[t] - recon
            else:
                a = alphas[i]
                for t in range(n):
                    residual[t] -= a * signs[i, t]
        if mode == MODE_ALTERNATING:
            if want_trace:
                _canonicalize_row(alphas, signs, k, n)
                trace_out[r, 0] = _residual_sq_row(w, alphas, signs, k, n)
            for cycle in range(cycles):
                ridge |= _refit_row(signs, w, alphas, k, n, gbuf, rbuf)
                _canonicalize_row(alphas, signs, k, n)
                if want_trace:
                    trace_out[r, 1 + 2 * cycle] = _residual_sq_row(
                        w, alphas, signs, k, n
                    )
                # codebook: all sign combinations, sorted ascending with
                # lexicographic tie order (stable insertion sort)
                for j in range(ncodes):
                    v = 0.0
                    for i in range(k):
                        v += alphas[i] if (j >> (k - 1 - i)) & 1 else -alphas[i]
                    values[j] = v
                    codes[j] = j
                for a_ in range(1, ncodes):
                    b_ = a_
                    while b_ > 0 and values[b_ - 1] > values[b_]:
                        values[b_ - 1], values[b_] = values[b_], values[b_ - 1]
                        codes[b_ - 1], codes[b_] = codes[b_], codes[b_ - 1]
                        b_ -= 1
                for t in range(n):
                    wt = w[t]
                    lo = 0
                    size = ncodes
                    while size > 1:
                        half = size >> 1
                        mid = lo + half - 1
                        if wt >= (values[mid] + values[mid + 1]) / 2.0:
                            lo += half
                        size = half
                    pattern = codes[lo]
                    for i in range(k):
                        signs[i, t] = 1.0 if (pattern >> (k - 1 - i)) & 1 else -1.0
                if want_trace:
                    trace_out[r, 2 + 2 * cycle] = _residual_sq_row(
                        w, alphas, signs, k, n
                    )
        _canonicalize_row(alphas, signs, k, n)
        ridge_out[r] = ridge
        for i in range(k):
            for wd in range(nwords):
                acc = np.uint64(0)
                base = wd * 64
                top = n - base
                if top > 64:
                    top = 64
                for b in range(top):
                    if signs[i, base + b] > 0.0:
                        acc |= one << np.uint64(b)
                words_out[r, i, wd] = acc
