"""Multi-bit binary quantization with XNOR-popcount kernels.

Approximates real vectors and matrices by k-bit codes (k sign planes
weighted by real coefficients), runs the resulting matrix-vector
products on packed 64-bit words, and evaluates quantized LSTM/GRU
language models.
"""

from .bitpack import (
    GemvCost,
    PackedBitPlane,
    dense_gemv,
    pack_signs,
    quantization_cost,
    quantized_gemv,
    quantized_gemv_concat,
    theoretical_speedup,
    xnor_popcount_dot,
)
from .model_io import (
    FormatError,
    QuantizedContainer,
    WeightContainer,
    load_quantized,
    load_tokens,
    load_tokens_text,
    load_weights,
    save_quantized,
    save_tokens,
    save_weights,
)
from .quantize import (
    Codebook,
    MultiBitCode,
    QuantizedMatrix,
    TernaryCode,
    alternating_quantize,
    assign_codes,
    balanced_quantize,
    bst_assign,
    build_codebook,
    greedy_quantize,
    quantize_matrix_rowwise,
    refined_greedy_quantize,
    refit_coefficients,
    relative_mse,
    ternary_quantize,
    uniform_quantize,
)
from .rnn import (
    LmEvalReport,
    QuantizedRnn,
    RnnWeights,
    eval_ppw,
    gru_step,
    lstm_step,
    quantize_rnn,
    quantized_gru_step,
    quantized_lstm_step,
    random_rnn_weights,
)
from .training import (
    TaskData,
    TrainConfig,
    TrainReport,
    clip_weights,
    finite_diff_check,
    make_copy,
    make_parity,
    ste_backward,
    ste_forward,
    train_toy,
)

__version__ = "0.1.0"

__all__ = [
    "Codebook",
    "FormatError",
    "GemvCost",
    "LmEvalReport",
    "MultiBitCode",
    "PackedBitPlane",
    "QuantizedContainer",
    "QuantizedMatrix",
    "QuantizedRnn",
    "RnnWeights",
    "TaskData",
    "TernaryCode",
    "TrainConfig",
    "TrainReport",
    "WeightContainer",
    "alternating_quantize",
    "assign_codes",
    "balanced_quantize",
    "bst_assign",
    "build_codebook",
    "clip_weights",
    "dense_gemv",
    "eval_ppw",
    "finite_diff_check",
    "greedy_quantize",
    "gru_step",
    "load_quantized",
    "load_tokens",
    "load_tokens_text",
    "load_weights",
    "lstm_step",
    "make_copy",
    "make_parity",
    "pack_signs",
    "quantization_cost",
    "quantize_matrix_rowwise",
    "quantize_rnn",
    "quantized_gemv",
    "quantized_gemv_concat",
    "quantized_gru_step",
    "quantized_lstm_step",
    "random_rnn_weights",
    "refined_greedy_quantize",
    "refit_coefficients",
    "relative_mse",
    "save_quantized",
    "save_tokens",
    "save_weights",
    "ste_backward",
    "ste_forward",
    "ternary_quantize",
    "theoretical_speedup",
    "train_toy",
    "uniform_quantize",
    "xnor_popcount_dot",
]
