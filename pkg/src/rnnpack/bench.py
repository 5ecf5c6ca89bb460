"""Inference microbenchmarks.

Times the forward pass of a language model on the host CPU, one thread,
after a warming phase, and pairs the timings with exact analytic
multiply-accumulate counts.  Absolute times depend on the machine, so
the comparable quantities are MAC ratios and paired measurements taken
in the same process: :func:`compare` interleaves two models iteration
by iteration, and :func:`compare_backends` does the same for one model
under two kernel backends, switching outside the timed windows.

Reports serialize to key=value text and parse back losslessly.
"""

import time
from dataclasses import dataclass, fields

import numpy as np

from . import cells, numkit, pipeline
from .backend import backend_name, set_backend, use_backend
from .errors import FormatError, ParameterError


def _as_stored(model):
    if isinstance(model, pipeline.StoredModel):
        return model
    return pipeline.StoredModel(model)


def mac_count(model):
    """Analytic multiply-accumulates for one inference step.

    Dense maps cost rows x cols, factored maps the sum of their factor
    sizes, TT maps the sum of their core contractions.  A pruned model
    counts the full dense figure (the compute stays dense) and
    quantization changes storage, not arithmetic.
    """
    return int(_as_stored(model).model.mac_count_per_step())


def _int_arg(value, name, low):
    if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
        raise ParameterError(f"{name} must be an integer")
    if value < low:
        raise ParameterError(f"{name} must be at least {low}")
    return int(value)


@dataclass(frozen=True)
class BenchReport:
    """Summary of one timing run.

    Latencies are nanoseconds per emitted step (iteration time divided
    by the window length).  ``params`` counts every trainable scalar,
    bias vectors included; ``size_bytes`` follows the storage pricing
    of :mod:`.pipeline`.
    """

    model_id: str
    backend: str
    warmup_iters: int
    measured_iters: int
    seq_len: int
    seed: int
    params: int
    size_bytes: int
    macs_per_step: int
    mean_ns: float
    std_ns: float
    min_ns: float

    def __post_init__(self):
        if self.warmup_iters < 0:
            raise ParameterError("warmup_iters must be non-negative")
        if self.measured_iters < 1:
            raise ParameterError("measured_iters must be at least 1")
        if self.seq_len < 1 or self.seed < 0:
            raise ParameterError("seq_len must be positive and seed non-negative")
        if min(self.params, self.size_bytes, self.macs_per_step) < 0:
            raise ParameterError("counts must be non-negative")
        if self.mean_ns < self.min_ns or self.std_ns < 0 or self.min_ns < 0:
            raise ParameterError("latency summary is inconsistent")


def _default_id(model):
    widths = "x".join(str(layer.state_dim) for layer in model.layers)
    return f"{model.kind}-{widths}-v{model.vocab_size}"


def _report_from_samples(stored, model_id, kernel, warmup, iters, seq_len,
                         seed, samples):
    stats = stored.stats()
    return BenchReport(
        model_id=model_id,
        backend=kernel,
        warmup_iters=warmup,
        measured_iters=iters,
        seq_len=seq_len,
        seed=seed,
        params=stats.total_params + stats.bias_params,
        size_bytes=stats.size_bytes,
        macs_per_step=stats.macs_per_step,
        mean_ns=float(np.mean(samples)),
        std_ns=float(np.std(samples)),
        min_ns=float(np.min(samples)),
    )


def run_bench(model, warmup=100, iters=1000, seq_len=1, seed=0,
              model_id=None, backend=None):
    """Time ``iters`` forward passes after ``warmup`` untimed ones.

    Every pass runs the same ``seq_len``-token window, drawn once from
    ``seed``, against a fresh zero state; exactly warmup + iters
    forward passes execute.  Timing covers the forward pass alone
    (the model is already loaded, nothing is read or written).
    ``backend`` optionally forces a kernel backend for the run.
    """
    stored = _as_stored(model)
    net = stored.model
    warmup = _int_arg(warmup, "warmup", 0)
    iters = _int_arg(iters, "iters", 1)
    seq_len = _int_arg(seq_len, "seq_len", 1)
    rng = numkit.make_rng(_int_arg(seed, "seed", 0))
    ids = rng.integers(0, net.vocab_size, size=seq_len)
    with use_backend(backend if backend is not None else backend_name()):
        kernel = backend_name()
        for _ in range(warmup):
            cells.forward_sequence(net, ids, want_cache=False)
        samples = np.empty(iters)
        for i in range(iters):
            start = time.perf_counter_ns()
            cells.forward_sequence(net, ids, want_cache=False)
            samples[i] = time.perf_counter_ns() - start
    samples /= seq_len
    return _report_from_samples(
        stored, model_id if model_id is not None else _default_id(net),
        kernel, warmup, iters, seq_len, seed, samples,
    )


@dataclass(frozen=True)
class Comparison:
    """Two reports measured pairwise in one process.

    ``speedup`` is baseline mean over candidate mean (above 1 means the
    candidate is faster); ``mac_ratio`` compares the analytic counts the
    same way; the diff fields summarize per-iteration baseline minus
    candidate latencies.
    """

    baseline: BenchReport
    candidate: BenchReport
    speedup: float
    mac_ratio: float
    mean_diff_ns: float
    std_diff_ns: float


def _paired_comparison(stored_a, stored_b, ids_a, ids_b, switch_a, switch_b,
                       labels, warmup, iters, seq_len, seed):
    run_a = lambda: cells.forward_sequence(stored_a.model, ids_a, want_cache=False)
    run_b = lambda: cells.forward_sequence(stored_b.model, ids_b, want_cache=False)
    for _ in range(warmup):
        switch_a()
        run_a()
        switch_b()
        run_b()
    samples_a = np.empty(iters)
    samples_b = np.empty(iters)
    for i in range(iters):
        kernel_a = switch_a()
        start = time.perf_counter_ns()
        run_a()
        samples_a[i] = time.perf_counter_ns() - start
        kernel_b = switch_b()
        start = time.perf_counter_ns()
        run_b()
        samples_b[i] = time.perf_counter_ns() - start
    samples_a /= seq_len
    samples_b /= seq_len
    report_a = _report_from_samples(
        stored_a, labels[0], kernel_a, warmup, iters, seq_len, seed, samples_a
    )
    report_b = _report_from_samples(
        stored_b, labels[1], kernel_b, warmup, iters, seq_len, seed, samples_b
    )
    diff = samples_a - samples_b
    return Comparison(
        baseline=report_a,
        candidate=report_b,
        speedup=report_a.mean_ns / report_b.mean_ns,
        mac_ratio=report_a.macs_per_step / report_b.macs_per_step,
        mean_diff_ns=float(np.mean(diff)),
        std_diff_ns=float(np.std(diff)),
    )


def compare(baseline, candidate, warmup=100, iters=1000, seq_len=1, seed=0,
            labels=None):
    """Paired timing of two models over a shared input sequence.

    The models alternate within each iteration so drift hits both
    equally.  They must share a vocabulary size, so one id sequence
    drives both.
    """
    stored_a, stored_b = _as_stored(baseline), _as_stored(candidate)
    if stored_a.model.vocab_size != stored_b.model.vocab_size:
        raise ParameterError("paired comparison needs a shared vocabulary size")
    warmup = _int_arg(warmup, "warmup", 0)
    iters = _int_arg(iters, "iters", 1)
    seq_len = _int_arg(seq_len, "seq_len", 1)
    rng = numkit.make_rng(_int_arg(seed, "seed", 0))
    ids = rng.integers(0, stored_a.model.vocab_size, size=seq_len)
    if labels is None:
        labels = (_default_id(stored_a.model), _default_id(stored_b.model))
    keep = backend_name
    return _paired_comparison(
        stored_a, stored_b, ids, ids, keep, keep,
        labels, warmup, iters, seq_len, seed,
    )


def compare_backends(model, baseline="python", candidate="compiled",
                     warmup=100, iters=1000, seq_len=1, seed=0):
    """Paired timing of one model under two kernel backends.

    Backend switches happen outside the timed windows; the previously
    active backend is restored afterwards.
    """
    stored = _as_stored(model)
    warmup = _int_arg(warmup, "warmup", 0)
    iters = _int_arg(iters, "iters", 1)
    seq_len = _int_arg(seq_len, "seq_len", 1)
    rng = numkit.make_rng(_int_arg(seed, "seed", 0))
    ids = rng.integers(0, stored.model.vocab_size, size=seq_len)
    label = _default_id(stored.model)
    previous = backend_name()
    try:
        return _paired_comparison(
            stored, stored, ids, ids,
            lambda: set_backend(baseline), lambda: set_backend(candidate),
            (label, label), warmup, iters, seq_len, seed,
        )
    finally:
        set_backend(previous)


_FIELD_TYPES = {f.name: f.type for f in fields(BenchReport)}


def format_report(report):
    """Serialize a report as one key=value line per field."""
    return "\n".join(
        f"{f.name}={getattr(report, f.name)}" for f in fields(BenchReport)
    )


def parse_report(text):
    """Rebuild a report from :func:`format_report` output, losslessly."""
    data = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise FormatError(f"bad report line {line!r}")
        key, value = line.split("=", 1)
        if key in data:
            raise FormatError(f"duplicate report field {key!r}")
        data[key] = value
    if set(data) != set(_FIELD_TYPES):
        missing = sorted(set(_FIELD_TYPES) - set(data))
        unknown = sorted(set(data) - set(_FIELD_TYPES))
        raise FormatError(
            f"report fields missing {missing} or unknown {unknown}"
        )
    kwargs = {}
    for name, kind in _FIELD_TYPES.items():
        value = data[name]
        if kind is str:
            kwargs[name] = value
        else:
            try:
                kwargs[name] = kind(value)
            except ValueError as err:
                raise FormatError(f"field {name!r}: {err}") from err
    return BenchReport(**kwargs)


def format_comparison(comparison):
    """Both reports plus the paired summary, as printable text."""
    return "\n".join([
        format_report(comparison.baseline),
        "",
        format_report(comparison.candidate),
        "",
        f"speedup={comparison.speedup}",
        f"mac_ratio={comparison.mac_ratio}",
        f"mean_diff_ns={comparison.mean_diff_ns}",
        f"std_diff_ns={comparison.std_diff_ns}",
    ])
