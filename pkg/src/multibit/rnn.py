"""Full-precision and quantized LSTM/GRU cells with perplexity evaluation.

The quantized cells run every matrix-vector product over packed binary
codes: weight matrices are quantized row by row ahead of time, the
hidden state is quantized on-line at each step, and the embedding input
reuses its stored row code. Gate math, the cell state, and the emitted
hidden state stay in full precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bitpack import dense_gemv, quantized_gemv_concat
from .quantize import (
    DEFAULT_CYCLES,
    MultiBitCode,
    QuantizedMatrix,
    alternating_quantize,
    quantize_matrix_rowwise,
)

LSTM_GATES = 4  # stacked row blocks: input, forget, output, candidate
GRU_GATES = 3  # stacked row blocks: reset, update, candidate


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(x, -500.0, 500.0)))


@dataclass(frozen=True, eq=False)
class RnnWeights:
    """Parameter bundle for a one-layer recurrent language model.

    ``W_i``/``W_h`` stack the gate blocks along rows: 4h of them for an
    LSTM (i, f, o, g), 3h for a GRU (r, z, candidate).
    """

    W_e: np.ndarray  # (V, d) embedding
    W_i: np.ndarray  # (gates*h, d)
    W_h: np.ndarray  # (gates*h, h)
    b_i: np.ndarray  # (gates*h,)
    b_h: np.ndarray  # (gates*h,)
    W_s: np.ndarray  # (V, h) softmax weights
    b_s: np.ndarray  # (V,)

    def __post_init__(self):
        for name in ("W_e", "W_i", "W_h", "b_i", "b_h", "W_s", "b_s"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            object.__setattr__(self, name, arr)
        V, d = self.W_e.shape
        h = self.W_h.shape[1]
        gates = self.W_h.shape[0] // h
        if gates not in (GRU_GATES, LSTM_GATES) or self.W_h.shape[0] != gates * h:
            raise ValueError("recurrent weight rows must be 3h (GRU) or 4h (LSTM)")
        if self.W_i.shape != (gates * h, d):
            raise ValueError("input weight shape mismatch")
        if self.b_i.shape != (gates * h,) or self.b_h.shape != (gates * h,):
            raise ValueError("bias shape mismatch")
        if self.W_s.shape != (V, h) or self.b_s.shape != (V,):
            raise ValueError("softmax layer shape mismatch")

    @property
    def vocab(self) -> int:
        return self.W_e.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.W_e.shape[1]

    @property
    def hidden(self) -> int:
        return self.W_h.shape[1]

    @property
    def cell_type(self) -> str:
        return "lstm" if self.W_h.shape[0] == LSTM_GATES * self.hidden else "gru"


@dataclass(frozen=True, eq=False)
class QuantizedRnn:
    """Quantized parameter bundle: matrices packed, biases full precision."""

    W_e: QuantizedMatrix
    W_i: QuantizedMatrix
    W_h: QuantizedMatrix
    b_i: np.ndarray
    b_h: np.ndarray
    W_s: QuantizedMatrix
    b_s: np.ndarray
    k_w: int
    k_h: int
    cycles: int = DEFAULT_CYCLES

    def __post_init__(self):
        if not (1 <= self.k_w <= 8 and 1 <= self.k_h <= 8):
            raise ValueError("weight and activation bits must be in 1..8")
        for name in ("b_i", "b_h", "b_s"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            object.__setattr__(self, name, arr)

    @property
    def vocab(self) -> int:
        return self.W_e.m

    @property
    def hidden(self) -> int:
        return self.W_h.n

    @property
    def cell_type(self) -> str:
        return "lstm" if self.W_h.m == LSTM_GATES * self.hidden else "gru"


def random_rnn_weights(vocab: int, embed_dim: int, hidden: int,
                       cell_type: str = "lstm", seed: int = 0,
                       zero_softmax: bool = False) -> RnnWeights:
    """Gaussian-initialized weights, scaled by fan-in."""
    if cell_type not in ("lstm", "gru"):
        raise ValueError(f"unknown cell type {cell_type!r}")
    gates = LSTM_GATES if cell_type == "lstm" else GRU_GATES
    rng = np.random.default_rng(seed)

    def mat(rows, cols):
        return rng.standard_normal((rows, cols)) / np.sqrt(cols)

    V, d, h = vocab, embed_dim, hidden
    W_s = np.zeros((V, h)) if zero_softmax else mat(V, h)
    b_s = np.zeros(V) if zero_softmax else 0.1 * rng.standard_normal(V)
    return RnnWeights(
        W_e=mat(V, d),
        W_i=mat(gates * h, d),
        W_h=mat(gates * h, h),
        b_i=0.1 * rng.standard_normal(gates * h),
        b_h=0.1 * rng.standard_normal(gates * h),
        W_s=W_s,
        b_s=b_s,
    )


# ----------------------------------------------------------------------
# Full-precision steps
# ----------------------------------------------------------------------


def _lstm_update(pre: np.ndarray, c_prev: np.ndarray, h: int):
    i = _sigmoid(pre[:h])
    f = _sigmoid(pre[h : 2 * h])
    o = _sigmoid(pre[2 * h : 3 * h])
    g = np.tanh(pre[3 * h :])
    c_t = f * c_prev + i * g
    h_t = o * np.tanh(c_t)
    return h_t, c_t


def lstm_step(w: RnnWeights, x_t, h_prev, c_prev):
    """One LSTM step: sigmoid gates i, f, o and tanh candidate g."""
    if w.cell_type != "lstm":
        raise ValueError("not an LSTM parameter bundle")
    x_t = np.asarray(x_t, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    c_prev = np.asarray(c_prev, dtype=np.float64)
    h = w.hidden
    if x_t.shape != (w.embed_dim,) or h_prev.shape != (h,) or c_prev.shape != (h,):
        raise ValueError("dimension mismatch")
    pre = dense_gemv(w.W_i, x_t) + w.b_i + dense_gemv(w.W_h, h_prev) + w.b_h
    return _lstm_update(pre, c_prev, h)


def _gru_update(pre_in: np.ndarray, pre_rec: np.ndarray, h_prev: np.ndarray, h: int):
    r = _sigmoid(pre_in[:h] + pre_rec[:h])
    z = _sigmoid(pre_in[h : 2 * h] + pre_rec[h : 2 * h])
    g = np.tanh(pre_in[2 * h :] + r * pre_rec[2 * h :])
    return z * h_prev + (1.0 - z) * g


def gru_step(w: RnnWeights, x_t, h_prev):
    """One GRU step; the reset gate scales the recurrent candidate term."""
    if w.cell_type != "gru":
        raise ValueError("not a GRU parameter bundle")
    x_t = np.asarray(x_t, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    h = w.hidden
    if x_t.shape != (w.embed_dim,) or h_prev.shape != (h,):
        raise ValueError("dimension mismatch")
    pre_in = dense_gemv(w.W_i, x_t) + w.b_i
    pre_rec = dense_gemv(w.W_h, h_prev) + w.b_h
    return _gru_update(pre_in, pre_rec, h_prev, h)


# ----------------------------------------------------------------------
# Quantized steps
# ----------------------------------------------------------------------


def quantize_rnn(w: RnnWeights, k_w: int, k_h: int,
                 cycles: int = DEFAULT_CYCLES) -> QuantizedRnn:
    """Quantize the four matrices row by row; biases stay untouched."""
    if not (1 <= k_w <= 8 and 1 <= k_h <= 8):
        raise ValueError("weight and activation bits must be in 1..8")
    return QuantizedRnn(
        W_e=quantize_matrix_rowwise(w.W_e, k_w, cycles),
        W_i=quantize_matrix_rowwise(w.W_i, k_w, cycles),
        W_h=quantize_matrix_rowwise(w.W_h, k_w, cycles),
        b_i=w.b_i.copy(),
        b_h=w.b_h.copy(),
        W_s=quantize_matrix_rowwise(w.W_s, k_w, cycles),
        b_s=w.b_s.copy(),
        k_w=k_w,
        k_h=k_h,
        cycles=cycles,
    )


def _quantize_state(q: QuantizedRnn, h_prev: np.ndarray) -> MultiBitCode:
    return alternating_quantize(h_prev, q.k_h, q.cycles)


def _q_lstm_core(q: QuantizedRnn, x_code: MultiBitCode, h_code: MultiBitCode,
                 c_prev: np.ndarray):
    pre = (
        quantized_gemv_concat(q.W_i, x_code)
        + q.b_i
        + quantized_gemv_concat(q.W_h, h_code)
        + q.b_h
    )
    return _lstm_update(pre, c_prev, q.hidden)


def quantized_lstm_step(q: QuantizedRnn, x_code: MultiBitCode, h_prev, c_prev):
    """LSTM step over packed codes.

    ``x_code`` is the stored embedding-row code; ``h_prev`` is quantized
    on-line here. The cell state and the returned hidden state are full
    precision.
    """
    if q.cell_type != "lstm":
        raise ValueError("not an LSTM parameter bundle")
    h_prev = np.asarray(h_prev, dtype=np.float64)
    c_prev = np.asarray(c_prev, dtype=np.float64)
    if x_code.n != q.W_i.n or h_prev.shape != (q.hidden,):
        raise ValueError("dimension mismatch")
    return _q_lstm_core(q, x_code, _quantize_state(q, h_prev), c_prev)


def _q_gru_core(q: QuantizedRnn, x_code: MultiBitCode, h_code: MultiBitCode,
                h_prev: np.ndarray):
    pre_in = quantized_gemv_concat(q.W_i, x_code) + q.b_i
    pre_rec = quantized_gemv_concat(q.W_h, h_code) + q.b_h
    return _gru_update(pre_in, pre_rec, h_prev, q.hidden)


def quantized_gru_step(q: QuantizedRnn, x_code: MultiBitCode, h_prev):
    """GRU step over packed codes; mirrors :func:`quantized_lstm_step`."""
    if q.cell_type != "gru":
        raise ValueError("not a GRU parameter bundle")
    h_prev = np.asarray(h_prev, dtype=np.float64)
    if x_code.n != q.W_i.n or h_prev.shape != (q.hidden,):
        raise ValueError("dimension mismatch")
    return _q_gru_core(q, x_code, _quantize_state(q, h_prev), h_prev)


# ----------------------------------------------------------------------
# Perplexity evaluation
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class LmEvalReport:
    token_count: int
    mean_nll: float
    ppw: float

    def to_dict(self) -> dict:
        return {
            "token_count": self.token_count,
            "mean_nll": self.mean_nll,
            "ppw": self.ppw,
        }


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    return shifted - np.log(np.exp(shifted).sum())


def _check_tokens(tokens, vocab: int) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size < 2:
        raise ValueError("need at least two tokens")
    if tokens.min() < 0 or tokens.max() >= vocab:
        raise ValueError("token id out of vocabulary range")
    return tokens


def eval_ppw(model, tokens) -> LmEvalReport:
    """Teacher-forced perplexity per word; states start at zero.

    Token t is predicted from tokens before t; the reported perplexity is
    exp of the mean per-token negative log-likelihood.
    """
    if isinstance(model, RnnWeights):
        return _eval_ppw_full(model, _check_tokens(tokens, model.vocab))
    if isinstance(model, QuantizedRnn):
        return _eval_ppw_quantized(model, _check_tokens(tokens, model.vocab))
    raise TypeError("model must be RnnWeights or QuantizedRnn")


def _finish_report(nll_sum: float, count: int) -> LmEvalReport:
    mean_nll = nll_sum / count
    return LmEvalReport(count, float(mean_nll), float(np.exp(mean_nll)))


def _eval_ppw_full(w: RnnWeights, tokens: np.ndarray) -> LmEvalReport:
    h = np.zeros(w.hidden)
    c = np.zeros(w.hidden)
    is_lstm = w.cell_type == "lstm"
    nll = 0.0
    for t in range(1, tokens.size):
        x = w.W_e[tokens[t - 1]]
        if is_lstm:
            h, c = lstm_step(w, x, h, c)
        else:
            h = gru_step(w, x, h)
        logp = _log_softmax(dense_gemv(w.W_s, h) + w.b_s)
        nll -= logp[tokens[t]]
    return _finish_report(nll, tokens.size - 1)


def _eval_ppw_quantized(q: QuantizedRnn, tokens: np.ndarray) -> LmEvalReport:
    h = np.zeros(q.hidden)
    c = np.zeros(q.hidden)
    h_code = _quantize_state(q, h)
    is_lstm = q.cell_type == "lstm"
    nll = 0.0
    for t in range(1, tokens.size):
        x_code = q.W_e.row_code(int(tokens[t - 1]))
        if is_lstm:
            h, c = _q_lstm_core(q, x_code, h_code, c)
        else:
            h = _q_gru_core(q, x_code, h_code, h)
        # one on-line code per step, shared by the softmax product now and
        # the recurrent product at the next step
        h_code = _quantize_state(q, h)
        logp = _log_softmax(quantized_gemv_concat(q.W_s, h_code) + q.b_s)
        nll -= logp[tokens[t]]
    return _finish_report(nll, tokens.size - 1)
