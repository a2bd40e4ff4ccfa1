"""Benchmark harness: approximation comparisons, kernel timings, self checks.

Timings use a monotonic clock, warm-up iterations, and the median of
repeated runs, all pinned to one BLAS thread. The quantization share of
a packed GEMV is reported separately because the hidden state must be
quantized on-line inside every call.
"""

from __future__ import annotations

import os
import platform
import tempfile
import time
from dataclasses import dataclass

import numpy as np

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    from contextlib import nullcontext

    def threadpool_limits(limits=None):
        return nullcontext()

from . import model_io
from .bitpack import (
    dense_gemv,
    pack_signs,
    quantized_gemv,
    quantized_gemv_concat,
    theoretical_speedup,
    xnor_popcount_dot,
)
from .quantize import (
    _alternating_rows,
    _balanced_rows,
    _greedy_rows,
    _reconstruct_rows,
    _uniform_rows_as_codes,
    alternating_quantize,
    build_codebook,
    bst_assign,
    quantize_matrix_rowwise,
    relative_mse,
)

REPORT_FORMAT_VERSION = 1

COMPARE_METHODS = ("uniform", "balanced", "greedy", "refined", "alternating")


def machine_descriptor() -> str:
    cpu = platform.processor() or platform.machine() or "unknown-cpu"
    return f"{platform.platform()} / {cpu}"


@dataclass
class BenchReport:
    """One result row; unused fields stay None.

    Comparison rows carry method/bits/MSE statistics; timing rows carry
    the total and quantization medians, their ratio, and the speedup
    against the dense baseline.
    """

    method: str
    seed: int
    machine: str
    bits: int | None = None
    abits: int | None = None
    tensor: str | None = None
    trials: int | None = None
    n: int | None = None
    m: int | None = None
    mse_mean: float | None = None
    mse_std: float | None = None
    total_ms: float | None = None
    quant_ms: float | None = None
    quant_share: float | None = None
    dense_ms: float | None = None
    speedup: float | None = None
    gamma: float | None = None

    def __post_init__(self):
        if self.quant_share is not None and not 0.0 <= self.quant_share <= 1.0:
            raise ValueError("quant share must lie in [0, 1]")
        for t in (self.total_ms, self.quant_ms, self.dense_ms):
            if t is not None and t <= 0.0:
                raise ValueError("times must be positive")

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


# ----------------------------------------------------------------------
# Method comparison (approximation quality)
# ----------------------------------------------------------------------


def _method_reconstruction(X: np.ndarray, method: str, k: int, cycles: int):
    if method == "uniform":
        alphas, signs = _uniform_rows_as_codes(X, k)
        return np.einsum("mk,mkn->mn", alphas, signs)
    if method == "balanced":
        return _balanced_rows(X, k)
    if method == "greedy":
        alphas, words, _ = _greedy_rows(X, k, refined=False)
    elif method == "refined":
        alphas, words, _ = _greedy_rows(X, k, refined=True)
    elif method == "alternating":
        alphas, words, _ = _alternating_rows(X, k, cycles)
    else:
        raise ValueError(f"unknown method {method!r}")
    return _reconstruct_rows(alphas, words, X.shape[1])


def _rowwise_relative_mse(X: np.ndarray, R: np.ndarray) -> np.ndarray:
    err = np.einsum("mn,mn->m", X - R, X - R)
    ref = np.einsum("mn,mn->m", X, X)
    return err / ref


def compare_methods(bits, trials: int = 100, n: int = 512, cycles: int = 2,
                    seed: int = 0, methods=COMPARE_METHODS,
                    weights_path=None) -> list[BenchReport]:
    """Mean/std relative MSE per method and bit width.

    Synthetic mode quantizes ``trials`` Gaussian vectors per bit width;
    with ``weights_path`` each tensor of the file is quantized row-wise
    instead and reported per tensor.
    """
    machine = machine_descriptor()
    rows: list[BenchReport] = []
    if weights_path is not None:
        container = model_io.load_weights(weights_path)
        for k in bits:
            for method in methods:
                for name, tensor in container.tensors.items():
                    X = np.atleast_2d(np.asarray(tensor, dtype=np.float64))
                    try:
                        recon = _method_reconstruction(X, method, k, cycles)
                    except ValueError as exc:
                        raise ValueError(f"{method}/k={k}: {exc}") from exc
                    mse = relative_mse(X.ravel(), recon.ravel())
                    rows.append(BenchReport(
                        method=method, seed=seed, machine=machine, bits=k,
                        tensor=name, n=X.shape[1], m=X.shape[0],
                        mse_mean=mse, mse_std=0.0, trials=1,
                    ))
        return rows
    for k in bits:
        rng = np.random.default_rng(seed + k)
        X = rng.standard_normal((trials, n))
        for method in methods:
            try:
                recon = _method_reconstruction(X, method, k, cycles)
            except ValueError as exc:
                raise ValueError(f"{method}/k={k}: {exc}") from exc
            mses = _rowwise_relative_mse(X, recon)
            rows.append(BenchReport(
                method=method, seed=seed, machine=machine, bits=k,
                trials=trials, n=n,
                mse_mean=float(mses.mean()), mse_std=float(mses.std()),
            ))
    return rows


# ----------------------------------------------------------------------
# GEMV timing
# ----------------------------------------------------------------------


def _median_ms(samples) -> float:
    return float(np.median(samples) * 1e3)


def bench_gemv(m: int, n: int, k_w: int, k_h: int, repeats: int = 30,
               cycles: int = 2, seed: int = 0, warmup: int = 5) -> BenchReport:
    """Time the packed GEMV (with on-line activation quantization) vs dense.

    Single-threaded by construction: BLAS pools are limited to one
    thread for the duration of the measurement.
    """
    if repeats < 1:
        raise ValueError("need at least one repeat")
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((m, n))
    W32 = W.astype(np.float32)
    x = rng.standard_normal(n)
    x32 = x.astype(np.float32)
    Wq = quantize_matrix_rowwise(W, k_w, cycles)

    quant_s = np.empty(repeats)
    total_s = np.empty(repeats)
    dense_s = np.empty(repeats)
    with threadpool_limits(limits=1):
        for _ in range(warmup):
            code = alternating_quantize(x, k_h, cycles)
            quantized_gemv_concat(Wq, code)
            dense_gemv(W32, x32)
        for r in range(repeats):
            t0 = time.perf_counter()
            code = alternating_quantize(x, k_h, cycles)
            t1 = time.perf_counter()
            quantized_gemv_concat(Wq, code)
            t2 = time.perf_counter()
            quant_s[r] = t1 - t0
            total_s[r] = t2 - t0
        for r in range(repeats):
            t0 = time.perf_counter()
            dense_gemv(W32, x32)
            dense_s[r] = time.perf_counter() - t0

    total_ms = _median_ms(total_s)
    quant_ms = _median_ms(quant_s)
    dense_ms = _median_ms(dense_s)
    return BenchReport(
        method="gemv", seed=seed, machine=machine_descriptor(),
        bits=k_w, abits=k_h, m=m, n=n, trials=repeats,
        total_ms=total_ms, quant_ms=quant_ms,
        quant_share=min(1.0, quant_ms / total_ms),
        dense_ms=dense_ms, speedup=dense_ms / total_ms,
        gamma=theoretical_speedup(m, n, k_w, k_h),
    )


# ----------------------------------------------------------------------
# Self checks
# ----------------------------------------------------------------------


def _check_bst(rng, trials: int, violations: list):
    for _ in range(trials):
        k = int(rng.integers(1, 5))
        alphas = np.sort(np.abs(rng.standard_normal(k)))[::-1]
        book = build_codebook(alphas)
        for w in rng.standard_normal(8) * (alphas.sum() + 1.0):
            idx = bst_assign(float(w), book)
            best = float(np.min(np.abs(w - book.values)))
            if abs(w - book.values[idx]) != best:
                violations.append(f"bst: suboptimal code for w={w}, alphas={alphas}")
                return


def _check_alternating(rng, trials: int, violations: list):
    for _ in range(trials):
        k = int(rng.integers(2, 5))
        w = rng.standard_normal(256)
        trace = []
        code = alternating_quantize(w, k, cycles=3, trace=trace)
        scale = float(w @ w)
        residuals = [r for _, r in trace]
        for prev, cur in zip(residuals, residuals[1:]):
            if cur > prev + 1e-12 * scale:
                violations.append(f"alternating: residual rose {prev} -> {cur}")
                return
        greedy_res = residuals[0]
        if residuals[-1] > greedy_res + 1e-12 * scale:
            violations.append("alternating: worse than greedy init")
            return
        err = w - code.reconstruct()
        if abs(float(err @ err) - residuals[-1]) > 1e-6 * max(scale, 1.0):
            violations.append("alternating: trace and reconstruction disagree")
            return


def _check_kernels(rng, trials: int, violations: list):
    for n in range(1, 201):
        a = rng.choice([-1, 1], size=n)
        b = rng.choice([-1, 1], size=n)
        packed = xnor_popcount_dot(pack_signs(a), pack_signs(b))
        if packed != int(a @ b):
            violations.append(f"kernel: packed dot wrong at n={n}")
            return
    for _ in range(trials):
        m = int(rng.integers(1, 65))
        n = int(rng.integers(1, 200))
        k_w = int(rng.integers(1, 4))
        k_h = int(rng.integers(1, 4))
        W = rng.standard_normal((m, n))
        x = rng.standard_normal(n)
        Wq = quantize_matrix_rowwise(W, k_w)
        xq = alternating_quantize(x, k_h)
        y_seq = quantized_gemv(Wq, xq)
        y_cat = quantized_gemv_concat(Wq, xq)
        y_ref = dense_gemv(Wq.reconstruct(), xq.reconstruct())
        if np.max(np.abs(y_seq - y_ref)) > 1e-4:
            violations.append("kernel: packed gemv disagrees with dense reference")
            return
        denom = np.maximum(np.abs(y_seq), 1e-30)
        if np.max(np.abs(y_cat - y_seq) / denom) > 1e-6:
            violations.append("kernel: concat and sequential gemv disagree")
            return


def _check_formats(rng, trials: int, violations: list):
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "x.bin")
        for _ in range(trials):
            wc = model_io.WeightContainer()
            for t in range(int(rng.integers(0, 4))):
                shape = tuple(int(s) for s in rng.integers(1, 6, size=2))
                wc.add(f"t{t}", rng.standard_normal(shape).astype(np.float32))
            model_io.save_weights(path, wc)
            back = model_io.load_weights(path)
            for name, tensor in wc.tensors.items():
                if not np.array_equal(back.tensors[name], tensor):
                    violations.append("io: weight round-trip mismatch")
                    return
            m = int(rng.integers(1, 7))
            n = int(rng.integers(1, 80))
            k = int(rng.integers(1, 4))
            q = quantize_matrix_rowwise(rng.standard_normal((m, n)), k)
            qc = model_io.QuantizedContainer().add("w", q)
            model_io.save_quantized(path, qc)
            q2 = model_io.load_quantized(path).tensors["w"]
            if not (
                np.array_equal(q2.row_alphas, q.row_alphas)
                and np.array_equal(q2.plane_words, q.plane_words)
            ):
                violations.append("io: quantized round-trip mismatch")
                return
            ids = rng.integers(0, 1000, size=int(rng.integers(0, 50)))
            model_io.save_tokens(path, ids)
            if not np.array_equal(model_io.load_tokens(path), ids):
                violations.append("io: token round-trip mismatch")
                return
        # corrupt one padding bit and expect a load failure
        q = quantize_matrix_rowwise(rng.standard_normal((2, 3)), 1)
        model_io.save_quantized(path, model_io.QuantizedContainer().add("w", q))
        with open(path, "rb") as fh:
            raw = bytearray(fh.read())
        raw[-1] ^= 0x80  # bit 63 of the last word; n=3 so it is padding
        with open(path, "wb") as fh:
            fh.write(raw)
        try:
            model_io.load_quantized(path)
        except model_io.FormatError:
            pass
        else:
            violations.append("io: corrupted padding accepted")


def selfcheck(level: str = "quick", seed: int = 0) -> list[str]:
    """Run the built-in oracle suites; returns human-readable violations."""
    if level not in ("quick", "full"):
        raise ValueError("level must be 'quick' or 'full'")
    mult = 10 if level == "full" else 1
    rng = np.random.default_rng(seed)
    violations: list[str] = []
    _check_bst(rng, 200 * mult, violations)
    _check_alternating(rng, 60 * mult, violations)
    _check_kernels(rng, 15 * mult, violations)
    _check_formats(rng, 10 * mult, violations)
    return violations
