"""Independent oracles used across the test suite.

Everything here is deliberately naive: direct enumeration, dense
arithmetic, textbook iterations. The library must match these, never the
other way around.
"""

import numpy as np


def naive_sign_dot(a, b) -> int:
    """Integer dot of two {-1,+1} vectors, plain Python accumulation."""
    return int(sum(int(x) * int(y) for x, y in zip(a, b)))


def nearest_code_indices(w: float, values: np.ndarray) -> set:
    """All indices of codebook values at minimum distance from w."""
    d = np.abs(values - w)
    return set(np.flatnonzero(d == d.min()).tolist())


def all_sign_vectors(n: int) -> np.ndarray:
    """(2^n, n) matrix of every {-1,+1} vector."""
    j = np.arange(2**n)[:, None]
    bits = (j >> np.arange(n - 1, -1, -1)[None, :]) & 1
    return 2.0 * bits - 1.0


def brute_force_two_bit_residual(w: np.ndarray) -> float:
    """Global optimum of the 2-plane approximation by full enumeration.

    Tries every pair of sign planes with the exact least-squares
    coefficients for that pair (rank-1 pairs collapse to the single-plane
    solution). Returns the minimal squared residual.
    """
    w = np.asarray(w, dtype=np.float64)
    n = w.size
    P = all_sign_vectors(n)
    s = P @ w
    d = P @ P.T
    wsq = float(w @ w)
    det = float(n) ** 2 - d**2
    with np.errstate(divide="ignore", invalid="ignore"):
        a1 = (n * s[:, None] - d * s[None, :]) / det
        a2 = (n * s[None, :] - d * s[:, None]) / det
        fit = a1 * s[:, None] + a2 * s[None, :]
    singular = det == 0.0
    fit[singular] = (s[:, None] ** 2 / n * np.ones_like(d))[singular]
    best_fit = float(np.max(fit))
    one_plane = float(np.max(s**2)) / n
    return wsq - max(best_fit, one_plane)


def lloyd_max_relative_mse(x: np.ndarray, levels: int = 4,
                           iters: int = 200) -> float:
    """Classic Lloyd iteration on the empirical sample.

    Alternates nearest-level assignment and per-cell means until the
    levels settle; returns squared distortion over squared norm.
    """
    x = np.asarray(x, dtype=np.float64)
    c = np.quantile(x, (np.arange(levels) + 0.5) / levels)
    for _ in range(iters):
        bounds = (c[:-1] + c[1:]) / 2.0
        idx = np.searchsorted(bounds, x)
        new = c.copy()
        for j in range(levels):
            cell = x[idx == j]
            if cell.size:
                new[j] = cell.mean()
        if np.allclose(new, c, rtol=0, atol=1e-12):
            c = new
            break
        c = new
    bounds = (c[:-1] + c[1:]) / 2.0
    idx = np.searchsorted(bounds, x)
    err = x - c[idx]
    return float(err @ err) / float(x @ x)


def dense_rowwise_gemv(W: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Row-by-row Python dot products; the slowest possible reference."""
    return np.array([float(np.dot(row, x)) for row in W])
