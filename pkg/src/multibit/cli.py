"""Command-line surface: compare, bench-gemv, quantize, eval-ppw, selfcheck."""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import bench, model_io
from .bench import REPORT_FORMAT_VERSION, machine_descriptor
from .quantize import quantize_matrix_rowwise
from .rnn import (
    QuantizedRnn,
    RnnWeights,
    eval_ppw,
    random_rnn_weights,
)
from .training import TrainConfig, make_task, train_toy

_WEIGHT_NAMES = ("W_e", "W_i", "W_h", "b_i", "b_h", "W_s", "b_s")


def _parse_bits(text: str) -> list[int]:
    try:
        return [int(b) for b in text.split(",") if b]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad bit list {text!r}") from None


def _envelope(args, command: str, rows: list[dict]) -> dict:
    return {
        "format_version": REPORT_FORMAT_VERSION,
        "command": command,
        "seed": getattr(args, "seed", None),
        "machine": machine_descriptor(),
        "rows": rows,
    }


def _write_json_out(args, command: str, rows: list[dict]) -> None:
    if getattr(args, "out", None):
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(_envelope(args, command, rows), fh, indent=2)
            fh.write("\n")


def _emit(args, command: str, rows: list[dict]) -> None:
    _write_json_out(args, command, rows)
    if getattr(args, "format", "tsv") == "json":
        print(json.dumps(_envelope(args, command, rows), indent=2))
    else:
        keys: list[str] = []
        for row in rows:
            keys.extend(k for k in row if k not in keys)
        print("\t".join(keys))
        for row in rows:
            print("\t".join(str(row.get(k, "")) for k in keys))


# ----------------------------------------------------------------------
# Model file helpers
# ----------------------------------------------------------------------


def weights_to_container(w: RnnWeights) -> model_io.WeightContainer:
    container = model_io.WeightContainer()
    for name in _WEIGHT_NAMES:
        container.add(name, getattr(w, name))
    return container


def weights_from_container(container: model_io.WeightContainer) -> RnnWeights:
    missing = [n for n in _WEIGHT_NAMES if n not in container.tensors]
    if missing:
        raise ValueError(f"model file is missing tensors: {', '.join(missing)}")
    return RnnWeights(**{n: container.tensors[n] for n in _WEIGHT_NAMES})


def quantized_rnn_from_container(container: model_io.QuantizedContainer,
                                 k_h: int, cycles: int) -> QuantizedRnn:
    missing = [n for n in _WEIGHT_NAMES if n not in container.tensors]
    if missing:
        raise ValueError(f"model file is missing tensors: {', '.join(missing)}")
    t = container.tensors

    def bias(name):
        return t[name].reconstruct().ravel()

    return QuantizedRnn(
        W_e=t["W_e"], W_i=t["W_i"], W_h=t["W_h"],
        b_i=bias("b_i"), b_h=bias("b_h"),
        W_s=t["W_s"], b_s=bias("b_s"),
        k_w=t["W_i"].k, k_h=k_h, cycles=cycles,
    )


def _exact_column_code(vec: np.ndarray):
    """Store a 1-d tensor losslessly as length-1 rows at k=1.

    Each scalar v becomes coefficient |v| with a single sign bit, so the
    reconstruction is exact at float32 precision.
    """
    return quantize_matrix_rowwise(np.asarray(vec, dtype=np.float64)[:, None], 1)


def _read_magic(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read(4)


def _load_tokens_any(path) -> np.ndarray:
    if str(path).endswith(".txt"):
        return model_io.load_tokens_text(path)
    return model_io.load_tokens(path)


# ----------------------------------------------------------------------
# Subcommands
# ----------------------------------------------------------------------


def _compare_pivot(rows) -> str:
    """Methods down, bit widths across, `mean±std` cells."""
    bits = sorted({r.bits for r in rows})
    keyed = {}
    lines = []
    for r in rows:
        key = (r.tensor, r.method) if r.tensor else (r.method,)
        if key not in keyed:
            keyed[key] = {}
            lines.append(key)
        keyed[key][r.bits] = f"{r.mse_mean}±{r.mse_std}"
    head = (["tensor", "method"] if len(lines[0]) == 2 else ["method"])
    out = ["\t".join(head + [f"k={b}" for b in bits])]
    for key in lines:
        out.append("\t".join(list(key) + [keyed[key].get(b, "") for b in bits]))
    return "\n".join(out)


def _cmd_compare(args) -> int:
    rows = bench.compare_methods(
        bits=args.bits, trials=args.trials, n=args.n, cycles=args.cycles,
        seed=args.seed, weights_path=args.weights,
    )
    dicts = [r.to_dict() for r in rows]
    _write_json_out(args, "compare", dicts)
    if args.format == "json":
        print(json.dumps(_envelope(args, "compare", dicts), indent=2))
    else:
        print(_compare_pivot(rows))
    return 0


def _cmd_bench_gemv(args) -> int:
    if args.threads != 1:
        print("error: benchmark timings require --threads 1", file=sys.stderr)
        return 2
    report = bench.bench_gemv(
        m=args.m, n=args.n, k_w=args.bits, k_h=args.abits,
        repeats=args.repeats, cycles=args.cycles, seed=args.seed,
    )
    _emit(args, "bench-gemv", [report.to_dict()])
    return 0


def _cmd_quantize(args) -> int:
    container = model_io.load_weights(args.in_path)
    out = model_io.QuantizedContainer()
    rows = []
    for name, tensor in container.tensors.items():
        data = np.asarray(tensor, dtype=np.float64)
        if data.ndim == 1:
            q = _exact_column_code(data)  # biases and vectors kept exact
        elif data.ndim == 2:
            q = quantize_matrix_rowwise(data, args.bits, args.cycles,
                                        method=args.method)
        else:
            raise ValueError(f"tensor {name!r} has unsupported rank {data.ndim}")
        out.add(name, q)
        denom = float(np.sum(data * data))
        mse = (
            float(np.sum((data - q.reconstruct().reshape(data.shape)) ** 2)) / denom
            if denom > 0 else 0.0
        )
        rows.append({"tensor": name, "bits": q.k, "relative_mse": mse})
    model_io.save_quantized(args.out_path, out)
    _emit(args, "quantize", rows)
    return 0


def _cmd_dequantize(args) -> int:
    container = model_io.load_quantized(args.in_path)
    out = model_io.WeightContainer()
    for name, q in container.tensors.items():
        recon = q.reconstruct()
        out.add(name, recon.ravel() if q.n == 1 else recon)
    model_io.save_weights(args.out_path, out)
    return 0


def _cmd_eval_ppw(args) -> int:
    magic = _read_magic(args.model)
    if magic == b"MBQW":
        model = weights_from_container(model_io.load_weights(args.model))
    elif magic == b"MBQQ":
        model = quantized_rnn_from_container(
            model_io.load_quantized(args.model), args.abits, args.cycles
        )
    else:
        raise model_io.FormatError(f"unrecognized model magic {magic!r}", "bad_magic")
    tokens = _load_tokens_any(args.tokens)
    report = eval_ppw(model, tokens)
    _emit(args, "eval-ppw", [report.to_dict()])
    return 0


def _cmd_selfcheck(args) -> int:
    violations = bench.selfcheck(level=args.level, seed=args.seed)
    for v in violations:
        print(f"FAIL {v}")
    print(f"selfcheck: {len(violations)} violation(s)")
    return 1 if violations else 0


def _cmd_train(args) -> int:
    config = TrainConfig(
        k_w=args.bits, k_h=args.abits, cycles=args.cycles,
        hidden=args.hidden, learning_rate=args.lr,
        grad_clip_mode=args.clip_mode, max_epochs=args.epochs,
        batch_size=args.batch_size, seed=args.seed,
    )
    task = make_task(args.task, seed=args.seed, samples=args.samples)
    report = train_toy(config, task)
    _emit(args, "train", [report.to_dict()])
    return 1 if report.diverged else 0


def _cmd_make_model(args) -> int:
    w = random_rnn_weights(
        args.vocab, args.embed, args.hidden, cell_type=args.cell,
        seed=args.seed, zero_softmax=args.zero_softmax,
    )
    model_io.save_weights(args.out_path, weights_to_container(w))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="multibit",
        description="Multi-bit binary quantization toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, fmt=True):
        p.add_argument("--seed", type=int, default=0)
        if fmt:
            p.add_argument("--format", choices=("tsv", "json"), default="tsv")
            p.add_argument("--out", help="also write the JSON report here")

    p = sub.add_parser("compare", help="relative MSE of every quantizer")
    p.add_argument("--bits", type=_parse_bits, default=[2, 3, 4])
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--n", type=int, default=512)
    p.add_argument("--cycles", type=int, default=2)
    p.add_argument("--weights", help="quantize this MBQW file instead of noise")
    common(p)
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("bench-gemv", help="time packed vs dense GEMV")
    p.add_argument("--m", type=int, default=4096)
    p.add_argument("--n", type=int, default=1024)
    p.add_argument("--bits", type=int, default=2, help="weight bits")
    p.add_argument("--abits", type=int, default=2, help="activation bits")
    p.add_argument("--repeats", type=int, default=30)
    p.add_argument("--cycles", type=int, default=2)
    p.add_argument("--threads", type=int, default=1)
    common(p)
    p.set_defaults(func=_cmd_bench_gemv)

    p = sub.add_parser("quantize", help="MBQW -> MBQQ row-wise quantization")
    p.add_argument("in_path", metavar="input.mbqw")
    p.add_argument("out_path", metavar="output.mbqq")
    p.add_argument("--bits", type=int, default=2)
    p.add_argument("--cycles", type=int, default=2)
    p.add_argument("--method", default="alternating",
                   choices=("uniform", "greedy", "refined", "alternating",
                            "ternary", "balanced"))
    common(p)
    p.set_defaults(func=_cmd_quantize)

    p = sub.add_parser("dequantize", help="MBQQ -> MBQW reconstruction")
    p.add_argument("in_path", metavar="input.mbqq")
    p.add_argument("out_path", metavar="output.mbqw")
    common(p, fmt=False)
    p.set_defaults(func=_cmd_dequantize)

    p = sub.add_parser("eval-ppw", help="perplexity per word of a model file")
    p.add_argument("--model", required=True, help="MBQW or MBQQ file")
    p.add_argument("--tokens", required=True, help="MBQT file or .txt ids")
    p.add_argument("--abits", type=int, default=2,
                   help="activation bits for quantized models")
    p.add_argument("--cycles", type=int, default=2)
    common(p)
    p.set_defaults(func=_cmd_eval_ppw)

    p = sub.add_parser("selfcheck", help="run the built-in oracle suites")
    p.add_argument("--level", choices=("quick", "full"), default="quick")
    common(p, fmt=False)
    p.set_defaults(func=_cmd_selfcheck)

    p = sub.add_parser("train", help="toy quantization-aware training")
    p.add_argument("--task", choices=("parity", "copy"), default="parity")
    p.add_argument("--bits", type=int, default=None, help="weight bits")
    p.add_argument("--abits", type=int, default=None, help="activation bits")
    p.add_argument("--cycles", type=int, default=2)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--samples", type=int, default=1024)
    p.add_argument("--clip-mode", choices=("entry", "norm"), default="entry")
    common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("make-model", help="write random RNN weights as MBQW")
    p.add_argument("out_path", metavar="output.mbqw")
    p.add_argument("--vocab", type=int, default=64)
    p.add_argument("--embed", type=int, default=32)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--cell", choices=("lstm", "gru"), default="lstm")
    p.add_argument("--zero-softmax", action="store_true",
                   help="zero softmax layer (uniform predictor)")
    common(p, fmt=False)
    p.set_defaults(func=_cmd_make_model)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "quantize" and args.method == "balanced":
        print(
            "error: balanced dequantization is an offset affine map with no "
            "exact multi-bit code; use it with 'compare' instead",
            file=sys.stderr,
        )
        return 2
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return 1
    except (ValueError, model_io.FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
