"""Quantization-aware training at toy scale with the straight-through estimator.

A single-hidden-layer tanh network with hand-written reverse-mode
gradients. During quantized training the forward pass runs on the
row-wise quantized weights (and optionally per-sample quantized hidden
activations) while gradients pass straight through to the full-precision
master copies, which are clipped to [-1, 1] after every update.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .quantize import DEFAULT_CYCLES, quantize_matrix_rowwise


# ----------------------------------------------------------------------
# STE primitives
# ----------------------------------------------------------------------


def ste_forward(w_full, k: int, cycles: int = DEFAULT_CYCLES):
    """Quantize a weight tensor row-wise, keeping the master copy outside.

    Returns (reconstruction, per-row codes). 1-d input is treated as a
    single row.
    """
    w_full = np.asarray(w_full, dtype=np.float64)
    squeeze = w_full.ndim == 1
    rows = w_full[None, :] if squeeze else w_full
    q = quantize_matrix_rowwise(rows, k, cycles)
    w_hat = q.reconstruct()
    codes = [q.row_code(r) for r in range(q.m)]
    return (w_hat[0] if squeeze else w_hat), codes


def ste_backward(grad_w_hat: np.ndarray) -> np.ndarray:
    """Straight-through estimate: the gradient passes unchanged."""
    return np.array(grad_w_hat, dtype=np.float64, copy=True)


def clip_weights(w, low: float = -1.0, high: float = 1.0) -> np.ndarray:
    """Entrywise clamp; idempotent."""
    return np.clip(w, low, high)


# ----------------------------------------------------------------------
# Config and report
# ----------------------------------------------------------------------


@dataclass
class TrainConfig:
    k_w: int | None = None  # None trains in full precision
    k_h: int | None = None
    cycles: int = DEFAULT_CYCLES
    hidden: int = 64
    learning_rate: float = 0.1
    lr_decay: float = 1.2
    lr_stop_ratio: float = 1e-3  # stop once lr < ratio * initial
    grad_clip: float = 0.25
    grad_clip_mode: str = "entry"  # "entry" or "norm"
    weight_clip: float = 1.0
    max_epochs: int = 50
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.lr_decay <= 1.0:
            raise ValueError("lr decay factor must exceed 1")
        if self.grad_clip <= 0 or self.weight_clip <= 0:
            raise ValueError("clip ranges must be symmetric and positive")
        if self.grad_clip_mode not in ("entry", "norm"):
            raise ValueError("grad_clip_mode must be 'entry' or 'norm'")


@dataclass
class TrainReport:
    """Loss curves; entry 0 is the pre-training state, so the loss lists
    hold ``epochs_run + 1`` values while ``lr_history`` has one per epoch."""

    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    lr_history: list[float] = field(default_factory=list)
    best_val: float = float("inf")
    epochs_run: int = 0
    diverged: bool = False

    def to_dict(self) -> dict:
        return {
            "train_losses": self.train_losses,
            "val_losses": self.val_losses,
            "lr_history": self.lr_history,
            "best_val": self.best_val,
            "epochs_run": self.epochs_run,
            "diverged": self.diverged,
        }


# ----------------------------------------------------------------------
# Synthetic tasks
# ----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TaskData:
    """A regression-free classification task: inputs, integer-free targets.

    ``kind`` is "binary" (one sigmoid output) or "grouped" (``groups``
    softmax blocks of ``group_size`` classes each).
    """

    X_train: np.ndarray
    y_train: np.ndarray
    X_val: np.ndarray
    y_val: np.ndarray
    kind: str
    groups: int = 1
    group_size: int = 0

    @property
    def n_in(self) -> int:
        return self.X_train.shape[1]

    @property
    def n_out(self) -> int:
        return 1 if self.kind == "binary" else self.groups * self.group_size


def make_parity(n_bits: int = 8, samples: int = 1024, seed: int = 0) -> TaskData:
    """Predict the parity of n random sign bits."""
    rng = np.random.default_rng(seed)
    X = rng.choice([-1.0, 1.0], size=(samples, n_bits))
    y = (np.sum(X < 0, axis=1) % 2).astype(np.float64)
    split = max(1, int(0.8 * samples))
    return TaskData(X[:split], y[:split], X[split:], y[split:], "binary")


def make_copy(seq_len: int = 4, vocab: int = 8, samples: int = 1024,
              seed: int = 0) -> TaskData:
    """Reproduce a token sequence from its one-hot encoding."""
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, vocab, size=(samples, seq_len))
    X = np.zeros((samples, seq_len * vocab))
    rows = np.arange(samples)[:, None]
    X[rows, np.arange(seq_len)[None, :] * vocab + tokens] = 1.0
    split = max(1, int(0.8 * samples))
    return TaskData(
        X[:split], tokens[:split].astype(np.int64),
        X[split:], tokens[split:].astype(np.int64),
        "grouped", groups=seq_len, group_size=vocab,
    )


def make_task(name: str, seed: int = 0, samples: int = 1024) -> TaskData:
    if name == "parity":
        return make_parity(samples=samples, seed=seed)
    if name == "copy":
        return make_copy(samples=samples, seed=seed)
    raise ValueError(f"unknown task {name!r}")


# ----------------------------------------------------------------------
# Single-hidden-layer network with manual gradients
# ----------------------------------------------------------------------


def init_params(n_in: int, hidden: int, n_out: int, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    return {
        "W1": rng.standard_normal((hidden, n_in)) / np.sqrt(n_in),
        "b1": np.zeros(hidden),
        "W2": rng.standard_normal((n_out, hidden)) / np.sqrt(hidden),
        "b2": np.zeros(n_out),
    }


def _quantize_activations(a: np.ndarray, k: int, cycles: int) -> np.ndarray:
    q = quantize_matrix_rowwise(a, k, cycles)  # one code per sample row
    return q.reconstruct()


def _grouped_log_softmax(z: np.ndarray, groups: int, size: int) -> np.ndarray:
    z = z.reshape(z.shape[0], groups, size)
    shifted = z - z.max(axis=2, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=2, keepdims=True))


def loss_and_grads(params: dict, X: np.ndarray, y: np.ndarray, task: TaskData,
                   k_w: int | None = None, k_h: int | None = None,
                   cycles: int = DEFAULT_CYCLES):
    """Forward loss plus gradients w.r.t. the master parameters.

    With ``k_w`` set, the forward pass uses quantized weights and the
    gradients flow back through the straight-through identity. ``k_h``
    additionally quantizes the hidden activations per sample.
    """
    W1, b1, W2, b2 = params["W1"], params["b1"], params["W2"], params["b2"]
    if k_w is not None:
        W1_hat, _ = ste_forward(W1, k_w, cycles)
        W2_hat, _ = ste_forward(W2, k_w, cycles)
    else:
        W1_hat, W2_hat = W1, W2
    B = X.shape[0]
    z1 = np.einsum("bi,hi->bh", X, W1_hat) + b1
    a1 = np.tanh(z1)
    a1_used = _quantize_activations(a1, k_h, cycles) if k_h is not None else a1
    z2 = np.einsum("bh,oh->bo", a1_used, W2_hat) + b2

    if task.kind == "binary":
        logits = z2[:, 0]
        # stable binary cross entropy on logits
        loss = float(np.mean(
            np.maximum(logits, 0.0) - logits * y + np.log1p(np.exp(-np.abs(logits)))
        ))
        p = 1.0 / (1.0 + np.exp(-np.clip(logits, -500.0, 500.0)))
        dz2 = ((p - y) / B)[:, None]
    else:
        logp = _grouped_log_softmax(z2, task.groups, task.group_size)
        rows = np.arange(B)[:, None]
        cols = np.arange(task.groups)[None, :]
        loss = float(-logp[rows, cols, y].mean())
        soft = np.exp(logp)
        soft[rows, cols, y] -= 1.0
        dz2 = soft.reshape(B, -1) / (B * task.groups)

    grads = {}
    grads["W2"] = ste_backward(np.einsum("bo,bh->oh", dz2, a1_used))
    grads["b2"] = dz2.sum(axis=0)
    da1 = ste_backward(np.einsum("bo,oh->bh", dz2, W2_hat))
    dz1 = da1 * (1.0 - a1 * a1)
    grads["W1"] = ste_backward(np.einsum("bh,bi->hi", dz1, X))
    grads["b1"] = dz1.sum(axis=0)
    return loss, grads


def evaluate_loss(params: dict, X: np.ndarray, y: np.ndarray, task: TaskData,
                  k_w: int | None = None, k_h: int | None = None,
                  cycles: int = DEFAULT_CYCLES) -> float:
    loss, _ = loss_and_grads(params, X, y, task, k_w, k_h, cycles)
    return loss


def _clip_grads(grads: dict, limit: float, mode: str) -> dict:
    if mode == "entry":
        return {k: np.clip(g, -limit, limit) for k, g in grads.items()}
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= limit:
        return grads
    scale = limit / total
    return {k: g * scale for k, g in grads.items()}


def train_toy(config: TrainConfig, task: TaskData) -> TrainReport:
    """Vanilla SGD with STE quantization, lr decay on validation regressions.

    The learning rate divides by the decay factor whenever validation
    loss fails to improve on the best seen; training stops when the rate
    falls below ``lr_stop_ratio`` of its initial value or at the epoch
    cap. A NaN loss aborts with the report so far flagged as diverged.
    """
    rng = np.random.default_rng(config.seed)
    params = init_params(task.n_in, config.hidden, task.n_out, seed=config.seed)
    for name in ("W1", "W2"):  # masters live inside the clip box from epoch 0
        params[name] = clip_weights(params[name], -config.weight_clip,
                                    config.weight_clip)
    report = TrainReport()
    lr = config.learning_rate
    lr_floor = config.lr_stop_ratio * config.learning_rate
    ntrain = task.X_train.shape[0]

    report.train_losses.append(
        evaluate_loss(params, task.X_train, task.y_train, task,
                      config.k_w, config.k_h, config.cycles)
    )
    report.val_losses.append(
        evaluate_loss(params, task.X_val, task.y_val, task,
                      config.k_w, config.k_h, config.cycles)
    )
    report.best_val = report.val_losses[0]

    for _ in range(config.max_epochs):
        if lr < lr_floor:
            break
        perm = rng.permutation(ntrain)
        for s in range(0, ntrain, config.batch_size):
            idx = perm[s : s + config.batch_size]
            loss, grads = loss_and_grads(
                params, task.X_train[idx], task.y_train[idx], task,
                config.k_w, config.k_h, config.cycles,
            )
            if not np.isfinite(loss):
                report.diverged = True
                return report
            grads = _clip_grads(grads, config.grad_clip, config.grad_clip_mode)
            for name in params:
                params[name] = params[name] - lr * grads[name]
                if name.startswith("W"):
                    params[name] = clip_weights(
                        params[name], -config.weight_clip, config.weight_clip
                    )
        train_loss = evaluate_loss(params, task.X_train, task.y_train, task,
                                   config.k_w, config.k_h, config.cycles)
        val_loss = evaluate_loss(params, task.X_val, task.y_val, task,
                                 config.k_w, config.k_h, config.cycles)
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            report.diverged = True
            return report
        report.train_losses.append(train_loss)
        report.val_losses.append(val_loss)
        report.lr_history.append(lr)
        report.epochs_run += 1
        if val_loss < report.best_val:
            report.best_val = val_loss
        else:
            lr /= config.lr_decay
    return report


# ----------------------------------------------------------------------
# Gradient verification
# ----------------------------------------------------------------------


def finite_diff_check(network, params: dict, h: float = 1e-4,
                      sample: int = 200, seed: int = 0) -> float:
    """Compare analytic gradients against central differences.

    ``network(params)`` must return (loss, grads). Checks at least
    ``sample`` randomly chosen coordinates (all of them if fewer exist)
    and returns the maximum deviation normalized by the largest gradient
    magnitude. Only meaningful on the full-precision path; the
    straight-through gradient is not the true gradient of a quantized
    map.
    """
    rng = np.random.default_rng(seed)
    _, grads = network(params)
    gmax = max(
        (float(np.max(np.abs(g))) for g in grads.values() if g.size), default=0.0
    )
    denom = max(gmax, 1e-12)
    names = sorted(params)
    sizes = np.array([params[n].size for n in names])
    total = int(sizes.sum())
    count = min(sample, total)
    chosen = rng.choice(total, size=count, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in chosen:
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[which]
        local = int(flat - offsets[which])
        idx = np.unravel_index(local, params[name].shape)
        saved = params[name][idx]
        params[name][idx] = saved + h
        plus, _ = network(params)
        params[name][idx] = saved - h
        minus, _ = network(params)
        params[name][idx] = saved
        numeric = (plus - minus) / (2.0 * h)
        worst = max(worst, abs(float(grads[name][idx]) - numeric) / denom)
    return worst
