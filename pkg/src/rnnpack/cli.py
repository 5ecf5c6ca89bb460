"""Command-line entry point: train, compress, eval, bench, inspect.

Thin wrappers over the library modules with stable, machine-parseable
output.  Every subcommand validates its paths and configuration before
any work begins; exit codes are 0 on success, 1 on a runtime failure,
2 on a usage error.  ``--format structured`` restricts output to
key=value lines that parse back into the originating report type.
"""

import argparse
import os
import sys
from dataclasses import dataclass

from . import bench, cells, langmodel, pipeline
from .backend import available_backends
from .errors import FormatError, ParameterError, RnnpackError


_KINDS = ("gru", "lstm", "rnn")


class UsageError(Exception):
    """Bad flags, paths, or configuration, caught before work begins."""


def _require_file(path, what):
    if not os.path.isfile(path):
        raise UsageError(f"{what} not found: {path}")


def _require_outdir(path, what):
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise UsageError(f"{what} directory not found: {parent}")


# ---------------------------------------------------------------------------
# structured renderings

_STATS_SCALARS = ("total_params", "bias_params", "size_bytes", "macs_per_step")


def format_stats(stats):
    """ModelStats as key=value lines."""
    lines = [
        f"component.{name}={stats.components[name]}"
        for name in sorted(stats.components)
    ]
    lines += [f"{name}={getattr(stats, name)}" for name in _STATS_SCALARS]
    return "\n".join(lines)


def _kv_lines(text, prefix=""):
    data = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        if prefix:
            if not line.startswith(prefix):
                continue
            line = line[len(prefix):]
        if "=" not in line:
            raise FormatError(f"bad report line {line!r}")
        key, value = line.split("=", 1)
        if key in data:
            raise FormatError(f"duplicate report field {key!r}")
        data[key] = value
    return data


def parse_stats(text, prefix=""):
    """Rebuild ModelStats from :func:`format_stats` output.

    ``prefix`` selects a namespaced block (e.g. ``"after."``) out of a
    larger report; without one, every line must belong to the stats.
    """
    data = _kv_lines(text, prefix)
    components = {}
    scalars = {}
    try:
        for key, value in data.items():
            if key.startswith("component."):
                components[key[len("component."):]] = int(value)
            elif key in _STATS_SCALARS:
                scalars[key] = int(value)
            else:
                raise FormatError(f"unknown stats field {key!r}")
    except ValueError as err:
        raise FormatError(f"bad stats value: {err}") from err
    if set(scalars) != set(_STATS_SCALARS) or not components:
        raise FormatError("stats fields missing")
    if sum(components.values()) != scalars["total_params"]:
        raise FormatError("component counts do not sum to the total")
    return pipeline.ModelStats(components=components, **scalars)


@dataclass(frozen=True)
class EvalReport:
    """Perplexity of one model over one corpus split."""

    split: str
    tokens: int
    perplexity: float
    accuracy: float


def format_eval(report):
    return "\n".join(
        f"{name}={getattr(report, name)}"
        for name in ("split", "tokens", "perplexity", "accuracy")
    )


def parse_eval(text):
    data = _kv_lines(text)
    if set(data) != {"split", "tokens", "perplexity", "accuracy"}:
        raise FormatError("eval fields missing or unknown")
    try:
        return EvalReport(
            split=data["split"],
            tokens=int(data["tokens"]),
            perplexity=float(data["perplexity"]),
            accuracy=float(data["accuracy"]),
        )
    except ValueError as err:
        raise FormatError(f"bad eval value: {err}") from err


def format_history(result):
    """TrainResult as structured text: one line per epoch, then footer."""
    lines = []
    for record in result.history:
        valid = record["valid_ppl"]
        lines.append(
            f"epoch stage={record['stage']} epoch={record['epoch']} "
            f"lr={record['lr']} train_ppl={record['train_ppl']} "
            f"valid_ppl={'none' if valid is None else valid}"
        )
    lines.append(f"stage_switch={result.stage_switch}")
    lines.append(f"best_valid={result.best_valid}")
    lines.append(f"aborted={result.aborted}")
    lines.append(f"abort_reason={result.abort_reason}")
    return "\n".join(lines)


def parse_history(text):
    """Rebuild a TrainResult from :func:`format_history` output."""
    history = []
    footer = {}
    try:
        for line in text.splitlines():
            if not line.strip():
                continue
            if line.startswith("epoch "):
                record = {}
                for part in line[len("epoch "):].split(" "):
                    key, value = part.split("=", 1)
                    record[key] = value
                valid = record["valid_ppl"]
                history.append({
                    "stage": int(record["stage"]),
                    "epoch": int(record["epoch"]),
                    "lr": float(record["lr"]),
                    "train_ppl": float(record["train_ppl"]),
                    "valid_ppl": None if valid == "none" else float(valid),
                })
            else:
                key, value = line.split("=", 1)
                if key in footer:
                    raise FormatError(f"duplicate history field {key!r}")
                footer[key] = value
        if set(footer) != {"stage_switch", "best_valid", "aborted", "abort_reason"}:
            raise FormatError("history footer fields missing or unknown")
        if footer["aborted"] not in ("True", "False"):
            raise FormatError("history aborted flag must be True or False")
        return langmodel.TrainResult(
            history=history,
            stage_switch=int(footer["stage_switch"]),
            best_valid=float(footer["best_valid"]),
            aborted=footer["aborted"] == "True",
            abort_reason=footer["abort_reason"],
        )
    except ValueError as err:
        raise FormatError(f"bad history line: {err}") from err


# ---------------------------------------------------------------------------
# shared flag groups

def _add_corpus_flags(parser):
    parser.add_argument("--fixture", action="store_true",
                        help="use the bundled desk-scale corpus")
    parser.add_argument("--train-file", help="training split text file")
    parser.add_argument("--valid-file", help="validation split text file")
    parser.add_argument("--test-file", help="test split text file")
    parser.add_argument("--vocab-size", type=int, default=None,
                        help="cap the vocabulary at the most frequent words")


def _load_corpus(args, needed=True):
    if args.fixture:
        if args.train_file:
            raise UsageError("--fixture excludes --train-file")
        return langmodel.load_fixture(max_size=args.vocab_size)
    if not args.train_file:
        if needed:
            raise UsageError("a corpus is required: --fixture or --train-file")
        return None
    for path, what in (
        (args.train_file, "train file"),
        (args.valid_file, "valid file"),
        (args.test_file, "test file"),
    ):
        if path is not None:
            _require_file(path, what)
    try:
        return langmodel.load_corpus(
            args.train_file, args.valid_file, args.test_file,
            max_size=args.vocab_size,
        )
    except ParameterError as err:
        raise UsageError(str(err)) from err


def _load_stored(path):
    _require_file(path, "model")
    return pipeline.load_model(path)


def _matching_corpus(args, stored, needed=True):
    corpus = _load_corpus(args, needed=needed)
    if corpus is not None and len(corpus.vocab) != stored.model.vocab_size:
        raise UsageError(
            f"corpus vocabulary ({len(corpus.vocab)} words) does not match "
            f"the model ({stored.model.vocab_size} words)"
        )
    return corpus


# ---------------------------------------------------------------------------
# subcommands

def _train_config(args):
    try:
        return langmodel.TrainConfig(
            stage1_lr=args.stage1_lr,
            stage1_epochs=args.stage1_epochs,
            stage2_lr=args.stage2_lr,
            stage2_decay=args.stage2_decay,
            stage2_epochs=args.stage2_epochs,
            batch_size=args.batch_size,
            unroll=args.unroll,
            dropout=args.dropout,
            clip_norm=args.clip_norm,
            patience=args.patience,
            seed=args.seed,
        )
    except ParameterError as err:
        raise UsageError(str(err)) from err


def _cmd_train(args):
    corpus = _load_corpus(args)
    config = _train_config(args)
    _require_outdir(args.out, "output")
    history_path = args.history or args.out + ".history"
    _require_outdir(history_path, "history")
    try:
        model = cells.new_model(
            args.kind, len(corpus.vocab), args.hidden, args.layers,
            seed=args.seed, emb_dim=args.emb_dim,
        )
    except ParameterError as err:
        raise UsageError(str(err)) from err

    result = langmodel.train_model(model, corpus, config)
    pipeline.save_model(model, args.out)
    with open(history_path, "w", encoding="utf-8") as fh:
        fh.write(format_history(result) + "\n")

    if args.format == "structured":
        print(f"model={args.out}")
        print(f"history={history_path}")
        print(f"epochs={len(result.history)}")
        print(f"stage_switch={result.stage_switch}")
        print(f"best_valid={result.best_valid}")
        print(f"aborted={result.aborted}")
    else:
        print(f"trained {len(result.history)} epochs "
              f"(stage switch after {result.stage_switch})")
        print(f"best validation perplexity {result.best_valid:.3f}")
        print(f"model written to {args.out}")
        print(f"history written to {history_path}")
    if result.aborted:
        print(f"error: training aborted: {result.abort_reason}", file=sys.stderr)
        return 1
    return 0


def _cmd_compress(args):
    _require_file(args.spec, "spec")
    _require_outdir(args.out, "output")
    try:
        spec = pipeline.load_spec(args.spec)
    except (FormatError, ParameterError) as err:
        raise UsageError(f"spec: {err}") from err
    stored = _load_stored(args.model)
    needs_corpus = any(step.finetune is not None for step in spec.steps)
    corpus = None
    if needs_corpus or args.fixture or args.train_file:
        corpus = _matching_corpus(args, stored, needed=needs_corpus)

    result = pipeline.run_pipeline(stored, spec, corpus=corpus)
    pipeline.save_model(result.stored, args.out)

    if args.format == "structured":
        before = format_stats(result.before).splitlines()
        after = format_stats(result.after).splitlines()
        print("\n".join(f"before.{line}" for line in before))
        print("\n".join(f"after.{line}" for line in after))
        print("steps=" + ",".join(step.name for step in result.steps))
        print(f"ratio={result.before.size_bytes / result.after.size_bytes}")
    else:
        print(pipeline.format_report(result))
        print(f"output written to {args.out}")
    return 0


def _cmd_eval(args):
    stored = _load_stored(args.model)
    corpus = _matching_corpus(args, stored)
    if args.split not in corpus.splits:
        raise UsageError(f"corpus has no {args.split!r} split")

    ppl = langmodel.perplexity(
        stored.model, corpus.lines(args.split),
        eos_id=corpus.vocab.eos_id, threads=args.threads,
    )
    report = EvalReport(
        split=args.split,
        tokens=corpus.token_count(args.split),
        perplexity=ppl,
        accuracy=langmodel.word_accuracy(ppl),
    )
    if args.format == "structured":
        print(format_eval(report))
    else:
        print(f"perplexity {report.perplexity:.3f}  "
              f"accuracy {report.accuracy:.6f}  "
              f"({report.tokens} {report.split} tokens)")
    return 0


def _cmd_bench(args):
    if args.backend is not None and args.backend not in available_backends():
        raise UsageError(
            f"backend {args.backend!r} not available; "
            f"choices: {available_backends()}"
        )
    if args.compare_backends:
        if args.backend is not None:
            raise UsageError("--compare-backends excludes --backend")
        missing = {"python", "compiled"} - set(available_backends())
        if missing:
            raise UsageError(f"backend not available: {', '.join(sorted(missing))}")
    stored = _load_stored(args.model)

    if args.compare_backends:
        comparison = bench.compare_backends(
            stored, warmup=args.warmup, iters=args.iters,
            seq_len=args.seq_len, seed=args.seed,
        )
        print(bench.format_comparison(comparison))
    else:
        report = bench.run_bench(
            stored, warmup=args.warmup, iters=args.iters,
            seq_len=args.seq_len, seed=args.seed,
            model_id=args.model_id or os.path.basename(args.model),
            backend=args.backend,
        )
        print(bench.format_report(report))
    return 0


def _cmd_inspect(args):
    config_mode = args.kind is not None
    if config_mode:
        if args.model is not None:
            raise UsageError("give a model file or a --kind config, not both")
        if args.hidden is None or args.vocab is None:
            raise UsageError("config inspection needs --kind, --hidden, --vocab")
        try:
            stats = pipeline.dense_stats(args.kind, args.layers, args.hidden,
                                         args.vocab)
        except ParameterError as err:
            raise UsageError(str(err)) from err
    else:
        if args.model is None:
            raise UsageError("a model file or a --kind config is required")
        stats = _load_stored(args.model).stats()

    if args.format == "structured":
        print(format_stats(stats))
    else:
        print(f"parameters    {stats.total_params:,} in matrices, "
              f"{stats.bias_params:,} in biases")
        print(f"size          {stats.size_bytes:,} bytes ({stats.size_mb:.2f} Mb)")
        print(f"macs/step     {stats.macs_per_step:,}")
        for name in sorted(stats.components):
            print(f"  {name:<12}{stats.components[name]:>14,}")
    return 0


# ---------------------------------------------------------------------------
# parser

def _build_parser():
    parser = argparse.ArgumentParser(
        prog="rnnpack",
        description="recurrent language model compression toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train a model and write a container")
    _add_corpus_flags(train)
    train.add_argument("--kind", choices=_KINDS,
                       default="lstm")
    train.add_argument("--hidden", type=int, required=True)
    train.add_argument("--layers", type=int, default=2)
    train.add_argument("--emb-dim", type=int, default=None)
    train.add_argument("--stage1-epochs", type=int, default=6)
    train.add_argument("--stage2-epochs", type=int, default=8)
    train.add_argument("--stage1-lr", type=float, default=2e-3)
    train.add_argument("--stage2-lr", type=float, default=0.5)
    train.add_argument("--stage2-decay", type=float, default=0.8)
    train.add_argument("--batch-size", type=int, default=4)
    train.add_argument("--unroll", type=int, default=32)
    train.add_argument("--dropout", type=float, default=0.0)
    train.add_argument("--clip-norm", type=float, default=5.0)
    train.add_argument("--patience", type=int, default=2)
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--out", required=True, help="container output path")
    train.add_argument("--history", default=None,
                       help="history file path (default: OUT.history)")
    train.add_argument("--format", choices=("text", "structured"),
                       default="text")

    compress = sub.add_parser("compress", help="apply a compression spec")
    compress.add_argument("model", help="input container")
    compress.add_argument("--spec", required=True, help="JSON step list")
    compress.add_argument("--out", required=True, help="container output path")
    _add_corpus_flags(compress)
    compress.add_argument("--format", choices=("text", "structured"),
                          default="text")

    evaluate = sub.add_parser("eval", help="perplexity over a corpus split")
    evaluate.add_argument("model", help="input container")
    _add_corpus_flags(evaluate)
    evaluate.add_argument("--split", choices=("train", "valid", "test"),
                          default="test")
    evaluate.add_argument("--threads", type=int, default=None,
                          help="evaluation fan-out")
    evaluate.add_argument("--format", choices=("text", "structured"),
                          default="text")

    benchp = sub.add_parser("bench", help="inference microbenchmark")
    benchp.add_argument("model", help="input container")
    benchp.add_argument("--warmup", type=int, default=100)
    benchp.add_argument("--iters", type=int, default=1000)
    benchp.add_argument("--seq-len", type=int, default=1)
    benchp.add_argument("--seed", type=int, default=0)
    benchp.add_argument("--model-id", default=None)
    benchp.add_argument("--backend", default=None,
                        help="force a kernel backend for the run")
    benchp.add_argument("--compare-backends", action="store_true",
                        help="paired python-versus-compiled timing")

    inspect = sub.add_parser("inspect", help="parameter and size accounting")
    inspect.add_argument("model", nargs="?", default=None,
                         help="input container")
    inspect.add_argument("--kind", choices=_KINDS,
                         default=None, help="inspect a config instead of a file")
    inspect.add_argument("--hidden", type=int, default=None)
    inspect.add_argument("--layers", type=int, default=2)
    inspect.add_argument("--vocab", type=int, default=None)
    inspect.add_argument("--format", choices=("text", "structured"),
                         default="text")

    return parser


_HANDLERS = {
    "train": _cmd_train,
    "compress": _cmd_compress,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
    "inspect": _cmd_inspect,
}


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 2
    except RnnpackError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
