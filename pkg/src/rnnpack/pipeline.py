"""Compression pipeline: accounting, orchestration, serialization.

This module owns three things.  First, parameter and size accounting:
closed-form counts for dense models and measured counts for any model,
with the reporting conventions used throughout (a megabyte is 10^6
bytes, a stored float costs 4 bytes, a quantized entry costs 1 byte
plus an 8-byte range per matrix, and bias vectors are tallied apart
from the matrix total so the headline figure is the matrix-only count).
Second, the pipeline runner: an ordered list of compression steps,
each optionally followed by fine-tuning, applied with stats recorded
after every step.  Third, the model container: a single-file format
with a fixed magic, a version, a canonical JSON header describing the
component graph, and little-endian blobs with per-blob checksums, so
files are inspectable and round-trips are bit-exact.
"""

import copy
import json
import math
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import cells, langmodel, lowrank, sparse, tensortrain
from .errors import FormatError, IntegrityError, ParameterError, ShapeError

_CELL_TERMS = {"rnn": 2, "lstm": 8, "gru": 6}


def param_count_parts(cell_kind, num_layers, hidden_size, vocab_size):
    """Matrix parameters of a square dense model, split by component.

    Returns {"cells", "embedding", "output"}: c*L*k^2 for the recurrent
    stack (c = 2 matrices per gate times the gate count), |V|*k for each
    of the embedding and output maps.  Biases are excluded throughout.
    """
    if cell_kind not in _CELL_TERMS:
        raise ParameterError(f"unknown cell kind {cell_kind!r}")
    dims = {"num_layers": num_layers, "hidden_size": hidden_size,
            "vocab_size": vocab_size}
    for name, value in dims.items():
        if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
            raise ParameterError(f"{name} must be an integer")
        if value < 1:
            raise ParameterError(f"{name} must be positive")
    length, k, vocab = (int(v) for v in dims.values())
    return {
        "cells": _CELL_TERMS[cell_kind] * length * k * k,
        "embedding": vocab * k,
        "output": vocab * k,
    }


def param_count_dense(cell_kind, num_layers, hidden_size, vocab_size):
    """Total matrix parameters of a square dense model.

    LSTM: 8Lk^2 + 2|V|k; GRU: 6Lk^2 + 2|V|k; RNN: 2Lk^2 + 2|V|k.
    """
    return sum(
        param_count_parts(cell_kind, num_layers, hidden_size, vocab_size).values()
    )


_BIAS_TERMS = {"rnn": 1, "lstm": 4, "gru": 3}


def dense_stats(cell_kind, num_layers, hidden_size, vocab_size):
    """The ModelStats an uncompressed model of this shape would report,
    computed without building it.

    Assumes standard cells with the embedding width tied to the hidden
    size; agrees exactly with model_stats of a freshly built model.
    """
    parts = param_count_parts(cell_kind, num_layers, hidden_size, vocab_size)
    per_layer = _CELL_TERMS[cell_kind] * hidden_size * hidden_size
    components = {f"layers.{i}": per_layer for i in range(num_layers)}
    components["embedding"] = parts["embedding"]
    components["output"] = parts["output"]
    total = sum(parts.values())
    bias = num_layers * _BIAS_TERMS[cell_kind] * hidden_size + vocab_size
    return ModelStats(
        components=components,
        total_params=total,
        bias_params=bias,
        size_bytes=(total + bias) * sparse.FLOAT_BYTES,
        macs_per_step=parts["cells"] + parts["output"],
    )


def _is_bias_name(name):
    last = name.rsplit(".", 1)[-1]
    return last == "b" or last.startswith("b_")


def _component_of(name):
    if name == "emb":
        return "embedding"
    if name == "out" or name.startswith("out."):
        return "output"
    if name.startswith("layers."):
        return "layers." + name.split(".", 2)[1]
    return name


@dataclass
class ModelStats:
    """Measured accounting for one model configuration.

    ``components`` maps component names ("embedding", "layers.0", ...,
    "output") to their matrix/core parameter counts; ``total_params``
    is their sum, matching the closed-form dense figures.  Bias vectors
    are tallied separately in ``bias_params``.  ``size_bytes`` prices
    floats at 4 bytes, quantized matrices at 1 byte per entry plus the
    range header, and pruned matrices at kept floats plus one mask bit
    per entry.  ``macs_per_step`` is the per-token multiply-accumulate
    count of the recurrent stack and output map.
    """

    components: dict
    total_params: int
    bias_params: int
    size_bytes: int
    macs_per_step: int

    @property
    def size_mb(self):
        return self.size_bytes / 1e6


def model_stats(model, mask=None, quantized=None):
    """Measure parameter counts, storage bytes, and per-step MACs."""
    arrays = model.param_arrays()
    quantized = quantized or {}
    masked = mask.masks if mask is not None else {}
    components = {}
    bias_params = 0
    size = 0
    for name, arr in arrays.items():
        if _is_bias_name(name):
            bias_params += arr.size
            size += arr.size * sparse.FLOAT_BYTES
            continue
        comp = _component_of(name)
        components[comp] = components.get(comp, 0) + arr.size
        if name in quantized:
            size += arr.size + sparse.QUANT_HEADER_BYTES
        elif name in masked:
            kept = int(masked[name].sum())
            size += kept * sparse.FLOAT_BYTES + (arr.size + 7) // 8
        else:
            size += arr.size * sparse.FLOAT_BYTES
    return ModelStats(
        components=components,
        total_params=sum(components.values()),
        bias_params=bias_params,
        size_bytes=size,
        macs_per_step=model.mac_count_per_step(),
    )


@dataclass
class StoredModel:
    """A model together with its compression state.

    ``mask`` pins pruned entries at zero; ``quantized`` maps parameter
    names to their code matrices (the float arrays in ``model`` hold
    the dequantized values, so inference needs no special casing).
    """

    model: cells.LanguageModel
    mask: sparse.PruneMask = None
    quantized: dict = None

    def stats(self):
        return model_stats(self.model, self.mask, self.quantized)


_STEP_KEYS = {
    "lr_cells": {"r", "init", "seed", "init_scale"},
    "lr_io": {"r"},
    "tt_cells": {"d", "max_ranks"},
    "tt_output": {"d", "max_ranks"},
    "prune": {"sparsity"},
    "quantize": {"components"},
}
_FACTOR_OPS = {"lr_cells", "lr_io", "tt_cells", "tt_output"}


def _int_param(value, name, low=1):
    if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
        raise ParameterError(f"{name} must be an integer")
    if value < low:
        raise ParameterError(f"{name} must be at least {low}")
    return int(value)


def _check_fraction(value, label):
    value = float(value)
    if not 0.0 <= value < 1.0:
        raise ParameterError(f"{label} must lie in [0, 1)")
    return value


def _validated_params(op, params):
    if op not in _STEP_KEYS:
        raise ParameterError(f"unknown pipeline step {op!r}")
    params = dict(params or {})
    extra = set(params) - _STEP_KEYS[op]
    if extra:
        raise ParameterError(f"step {op!r} does not accept {sorted(extra)}")
    out = {}
    if op in ("lr_cells", "lr_io"):
        if "r" not in params:
            raise ParameterError(f"step {op!r} needs a rank r")
        out["r"] = _int_param(params["r"], "r")
    if op == "lr_cells":
        out["init"] = params.get("init", "svd")
        if out["init"] not in ("svd", "random"):
            raise ParameterError("init must be 'svd' or 'random'")
        out["seed"] = _int_param(params.get("seed", 0), "seed", low=0)
        out["init_scale"] = float(params.get("init_scale", 0.1))
        if not 0.0 < out["init_scale"] < math.inf:
            raise ParameterError("init_scale must be positive and finite")
    if op in ("tt_cells", "tt_output"):
        out["d"] = _int_param(params.get("d", 4), "d")
        out["max_ranks"] = _int_param(params.get("max_ranks", 4), "max_ranks")
    if op == "prune":
        if "sparsity" not in params:
            raise ParameterError("prune needs a sparsity target")
        target = params["sparsity"]
        if isinstance(target, dict):
            if not target:
                raise ParameterError("sparsity map is empty")
            out["sparsity"] = {
                str(k): _check_fraction(v, f"sparsity for {k!r}")
                for k, v in target.items()
            }
        else:
            out["sparsity"] = _check_fraction(target, "sparsity")
    if op == "quantize":
        comps = params.get("components")
        if comps == "all":
            comps = None
        if comps is not None:
            if isinstance(comps, str):
                comps = [comps]
            if not isinstance(comps, (list, tuple)) or not comps or not all(
                isinstance(c, str) for c in comps
            ):
                raise ParameterError(
                    "components must be 'all' or a list of component names"
                )
            comps = list(comps)
        out["components"] = comps
    return out


@dataclass
class CompressionStep:
    """One pipeline stage: an operation, its parameters, and an optional
    fine-tuning config applied right after the operation."""

    op: str
    params: dict = field(default_factory=dict)
    finetune: langmodel.TrainConfig = None


@dataclass
class CompressionSpec:
    """Ordered compression steps with the legality rules enforced.

    Factorizations come before pruning and quantization; each component
    is factorized by at most one family (the recurrent cells by lr_cells
    or tt_cells, the embedding/output maps by lr_io or tt_output); an
    lr_io step must immediately follow lr_cells, because the two share
    one projection and are applied as a single factorization (fine-tune
    the pair through the lr_io entry); quantization, which freezes the
    stored form, is always the final step and carries no fine-tuning.
    """

    steps: list

    def __post_init__(self):
        cells_factors = 0
        io_factors = 0
        seen_postfactor = False
        for i, step in enumerate(self.steps):
            if not isinstance(step, CompressionStep):
                raise ParameterError("steps must be CompressionStep instances")
            step.params = _validated_params(step.op, step.params)
            if step.finetune is not None and not isinstance(
                step.finetune, langmodel.TrainConfig
            ):
                raise ParameterError("finetune must be a TrainConfig")
            if step.op in ("lr_cells", "tt_cells"):
                cells_factors += 1
            if step.op in ("lr_io", "tt_output"):
                io_factors += 1
            if step.op in _FACTOR_OPS and seen_postfactor:
                raise ParameterError(
                    "factorization steps must precede pruning and quantization"
                )
            if step.op in ("prune", "quantize"):
                seen_postfactor = True
            if step.op == "quantize":
                if i != len(self.steps) - 1:
                    raise ParameterError("quantization must be the final step")
                if step.finetune is not None:
                    raise ParameterError("quantization cannot carry fine-tuning")
        if cells_factors > 1:
            raise ParameterError("at most one factorization of the recurrent cells")
        if io_factors > 1:
            raise ParameterError(
                "at most one factorization of the embedding/output maps"
            )
        ops = [s.op for s in self.steps]
        if "lr_io" in ops:
            at = ops.index("lr_io")
            if at == 0 or ops[at - 1] != "lr_cells":
                raise ParameterError(
                    "lr_io must immediately follow lr_cells; they share one "
                    "projection"
                )
            if self.steps[at - 1].finetune is not None:
                raise ParameterError(
                    "fine-tune the merged lr_cells+lr_io pair via the lr_io step"
                )
        if "tt_output" in ops and "lr_cells" in ops:
            if ops.index("tt_output") < ops.index("lr_cells"):
                raise ParameterError(
                    "factorize the cells before the output map; lr_cells "
                    "replaces the output adapter"
                )


def parse_spec(data):
    """Build a CompressionSpec from parsed structured text.

    Accepts a list of step objects, or {"steps": [...]}.  Each step is
    {"op": name, "finetune": {...}?, ...params}; finetune fields are
    TrainConfig fields.
    """
    if isinstance(data, dict) and set(data) == {"steps"}:
        data = data["steps"]
    if not isinstance(data, list):
        raise FormatError("spec must be a list of steps")
    steps = []
    for item in data:
        if not isinstance(item, dict) or "op" not in item:
            raise FormatError("each step must be an object with an 'op' field")
        item = dict(item)
        op = item.pop("op")
        finetune = item.pop("finetune", None)
        if finetune is not None:
            if not isinstance(finetune, dict):
                raise FormatError("finetune must be an object of training fields")
            try:
                finetune = langmodel.TrainConfig(**finetune)
            except TypeError as err:
                raise ParameterError(f"bad finetune config: {err}") from err
        steps.append(CompressionStep(op, item, finetune))
    return CompressionSpec(steps)


def load_spec(path):
    """Read a compression spec from a JSON file."""
    with open(path, "r", encoding="utf-8") as handle:
        try:
            data = json.load(handle)
        except json.JSONDecodeError as err:
            raise FormatError(f"spec file is not valid JSON: {err}") from err
    return parse_spec(data)


@dataclass
class StepReport:
    name: str
    stats: ModelStats
    finetune: langmodel.TrainResult = None


@dataclass
class PipelineResult:
    stored: StoredModel
    before: ModelStats
    after: ModelStats
    steps: list


def _merge_masks(old, new):
    if old is None:
        return new
    masks = dict(old.masks)
    for name, keep in new.masks.items():
        masks[name] = (masks[name] & keep) if name in masks else keep
    return sparse.PruneMask(masks, new.target_sparsity)


def run_pipeline(model, spec, corpus=None):
    """Apply the spec's steps in order, fine-tuning where configured.

    The input model is copied, never mutated.  Stats are measured after
    every step; an adjacent lr_cells+lr_io pair is applied as one
    factorization and reported as one step.  Any error mid-run is
    re-raised with the partial report attached as ``partial_report``.
    """
    if not isinstance(spec, CompressionSpec):
        raise ParameterError("spec must be a CompressionSpec")
    if isinstance(model, StoredModel):
        work = copy.deepcopy(model.model)
        mask = copy.deepcopy(model.mask)
        quantized = copy.deepcopy(model.quantized)
    else:
        work, mask, quantized = copy.deepcopy(model), None, None
    if quantized and spec.steps:
        raise ParameterError(
            "model is already quantized; further compression needs the "
            "float model"
        )
    if corpus is None and any(s.finetune is not None for s in spec.steps):
        raise ParameterError("fine-tuning steps need a corpus")
    before = model_stats(work, mask, quantized)
    reports = []
    try:
        i = 0
        while i < len(spec.steps):
            step = spec.steps[i]
            label, advance, finetune = step.op, 1, step.finetune
            p = step.params
            if step.op == "lr_cells":
                r_io = None
                if i + 1 < len(spec.steps) and spec.steps[i + 1].op == "lr_io":
                    nxt = spec.steps[i + 1]
                    r_io = nxt.params["r"]
                    label, advance, finetune = "lr_cells+lr_io", 2, nxt.finetune
                work = lowrank.compress_model_lr(
                    work, p["r"], r_io=r_io, init=p["init"], seed=p["seed"],
                    init_scale=p["init_scale"],
                )
            elif step.op == "tt_cells":
                work = tensortrain.tt_compress_model(
                    work, d=p["d"], max_ranks=p["max_ranks"]
                )
            elif step.op == "tt_output":
                work = tensortrain.tt_compress_model(
                    work, d=p["d"], max_ranks=p["max_ranks"],
                    compress_output=True, compress_cells=False,
                )
            elif step.op == "prune":
                mask = _merge_masks(mask, sparse.prune(work, p["sparsity"]))
                mask.apply(work)
            elif step.op == "quantize":
                quantized = sparse.quantize_arrays(work, components=p["components"])
                sparse.dequantize_into(work, quantized)
                if mask is not None:
                    # pruned zeros land in a nonzero code interval, so
                    # dequantization must not resurrect them
                    mask.apply(work)
            else:
                raise ParameterError(f"unknown pipeline step {step.op!r}")
            result = None
            if finetune is not None:
                if mask is not None:
                    result = sparse.finetune_pruned(work, mask, corpus, finetune)
                else:
                    result = langmodel.train_model(work, corpus, finetune)
            reports.append(StepReport(label, model_stats(work, mask, quantized), result))
            i += advance
    except Exception as err:
        err.partial_report = PipelineResult(
            StoredModel(work, mask, quantized), before,
            reports[-1].stats if reports else before, list(reports),
        )
        raise
    after = reports[-1].stats if reports else before
    return PipelineResult(StoredModel(work, mask, quantized), before, after, reports)


def _stats_line(label, stats):
    return (
        f"{label:<22} params {stats.total_params:>12,}  "
        f"size {stats.size_mb:8.2f} Mb  macs/step {stats.macs_per_step:,}"
    )


def format_report(result):
    """Render a pipeline result as printable lines."""
    lines = [_stats_line("before", result.before)]
    for number, report in enumerate(result.steps, 1):
        lines.append(_stats_line(f"{number}. {report.name}", report.stats))
        tuned = report.finetune
        if tuned is not None:
            note = f"     fine-tuned: best valid ppl {tuned.best_valid:.3f}"
            if tuned.aborted:
                note += f" (aborted: {tuned.abort_reason})"
            lines.append(note)
    ratio = result.before.size_bytes / max(result.after.size_bytes, 1)
    lines.append(f"compression ratio x{ratio:.2f} by stored bytes")
    return "\n".join(lines)


_MAGIC = b"RNNPACKM"
_VERSION = 1
_PREFIX = struct.calcsize("<8sIQ")


def _op_desc(op):
    if getattr(op, "is_dense", False):
        return {"kind": "dense"}
    if isinstance(op, tensortrain.TtLinear):
        return {
            "kind": "tt",
            "row_modes": list(op.tt.row_modes),
            "col_modes": list(op.tt.col_modes),
        }
    raise ParameterError(f"cannot serialize operator type {type(op).__name__}")


def _layer_desc(layer):
    if isinstance(layer, lowrank.LrGruLayer):
        return {"type": "lr_gru"}
    if not isinstance(layer, (cells.RnnLayer, cells.LstmLayer, cells.GruLayer)):
        raise ParameterError(f"cannot serialize layer type {type(layer).__name__}")
    desc = {
        "type": layer.kind,
        "ops": {name: _op_desc(op) for name, op in sorted(layer.ops.items())},
        "bias": sorted(layer.bias),
        "proj": None if layer.proj is None else _op_desc(layer.proj),
    }
    if layer.kind == "gru":
        desc["blend_input"] = bool(layer.blend_input)
    return desc


_LR_GRU_FIELDS = ("w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "w_p",
                  "b_z", "b_r", "b_h")


def save_model(model, path):
    """Write a model (or StoredModel) to a single-file container.

    Layout: magic, version, header length, canonical JSON header, then
    raw little-endian blobs in header order.  Quantized matrices are
    stored as their uint8 codes, masks as packed bits; every blob
    carries a crc32 in the header.
    """
    stored = model if isinstance(model, StoredModel) else StoredModel(model)
    arrays = stored.model.param_arrays()
    quantized = stored.quantized or {}
    for name, q in quantized.items():
        if name not in arrays:
            raise ParameterError(f"quantized entry names unknown weights {name!r}")
        if q.codes.shape != arrays[name].shape:
            raise ShapeError(f"quantized shape differs for {name!r}")
    mask = stored.mask
    if mask is not None:
        for name, keep in mask.masks.items():
            if name not in arrays:
                raise ParameterError(f"mask refers to unknown weights {name!r}")
            if keep.shape != arrays[name].shape:
                raise ShapeError(f"mask shape differs for {name!r}")
    blobs = []
    for name in sorted(arrays):
        if name in quantized:
            data = np.ascontiguousarray(quantized[name].codes)
            blobs.append((name, "u1", list(arrays[name].shape), data.tobytes()))
        else:
            data = np.ascontiguousarray(arrays[name]).astype("<f8", copy=False)
            blobs.append((name, "<f8", list(arrays[name].shape), data.tobytes()))
    if mask is not None:
        for name in sorted(mask.masks):
            keep = mask.masks[name]
            raw = np.packbits(keep).tobytes()
            blobs.append(("mask." + name, "u1", list(keep.shape), raw))
    header = {
        "model": {
            "kind": stored.model.kind,
            "layers": [_layer_desc(l) for l in stored.model.layers],
            "output": _op_desc(stored.model.output.op),
        },
        "quantized": {
            name: {"min": float(q.min_val), "max": float(q.max_val)}
            for name, q in quantized.items()
        },
        "mask": None if mask is None else {
            "names": sorted(mask.masks),
            "target_sparsity": mask.target_sparsity,
        },
        "blobs": [
            {"name": name, "dtype": dtype, "shape": shape,
             "bytes": len(raw), "crc": zlib.crc32(raw)}
            for name, dtype, shape, raw in blobs
        ],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as handle:
        handle.write(struct.pack("<8sIQ", _MAGIC, _VERSION, len(head)))
        handle.write(head)
        for _, _, _, raw in blobs:
            handle.write(raw)


def _check_header(header, quantized_meta):
    if not isinstance(header, dict):
        raise FormatError("container header must be an object")
    for key in ("blobs", "mask", "model", "quantized"):
        if key not in header:
            raise FormatError(f"container header lacks {key!r}")
    if not isinstance(header["blobs"], list):
        raise FormatError("blob table must be a list")
    seen = set()
    for entry in header["blobs"]:
        if not isinstance(entry, dict):
            raise FormatError("blob entries must be objects")
        for key, kind in (("name", str), ("dtype", str), ("shape", list),
                          ("bytes", int), ("crc", int)):
            if not isinstance(entry.get(key), kind):
                raise FormatError(f"blob field {key!r} missing or mistyped")
        name = entry["name"]
        if name in seen:
            raise FormatError(f"duplicate blob {name!r}")
        seen.add(name)
        shape = entry["shape"]
        if not all(isinstance(v, int) and v >= 0 for v in shape):
            raise FormatError(f"blob {name!r} has a malformed shape")
        count = math.prod(shape)
        if name.startswith("mask."):
            expect, want_dtype = (count + 7) // 8, "u1"
        elif name in quantized_meta:
            expect, want_dtype = count, "u1"
        else:
            expect, want_dtype = count * 8, "<f8"
        if entry["dtype"] != want_dtype:
            raise FormatError(f"blob {name!r} has dtype {entry['dtype']!r}, "
                              f"expected {want_dtype!r}")
        if entry["bytes"] != expect:
            raise FormatError(f"blob {name!r} length disagrees with its shape")


def _op_from_desc(desc, prefix, arrays):
    if desc["kind"] == "dense":
        return cells.DenseLinear(arrays[prefix])
    if desc["kind"] == "tt":
        row_modes = tuple(int(v) for v in desc["row_modes"])
        col_modes = tuple(int(v) for v in desc["col_modes"])
        cores = [arrays[f"{prefix}.cores.{m}"] for m in range(len(row_modes))]
        tt = tensortrain.TTMatrix(
            math.prod(row_modes), math.prod(col_modes), row_modes, col_modes, cores
        )
        return tensortrain.TtLinear(tt)
    raise FormatError(f"unknown operator kind {desc['kind']!r}")


def _layer_from_desc(desc, index, arrays):
    prefix = f"layers.{index}"
    if desc["type"] == "lr_gru":
        return lowrank.LrGruLayer(
            *(arrays[f"{prefix}.{n}"] for n in _LR_GRU_FIELDS)
        )
    ops = {
        name: _op_from_desc(op_desc, f"{prefix}.{name}", arrays)
        for name, op_desc in desc["ops"].items()
    }
    bias = {name: arrays[f"{prefix}.{name}"] for name in desc["bias"]}
    if desc["type"] == "gru":
        return cells.GruLayer(ops, bias, blend_input=bool(desc["blend_input"]))
    proj = None
    if desc["proj"] is not None:
        proj = _op_from_desc(desc["proj"], f"{prefix}.proj", arrays)
    kinds = {"rnn": cells.RnnLayer, "lstm": cells.LstmLayer}
    if desc["type"] not in kinds:
        raise FormatError(f"unknown layer type {desc['type']!r}")
    return kinds[desc["type"]](ops, bias, proj)


def load_model(path):
    """Read a container written by save_model; returns a StoredModel.

    The whole file is verified (magic, version, header schema, blob
    lengths, every checksum) before any model object is constructed, so
    a corrupt file never yields a partial model.
    """
    with open(path, "rb") as handle:
        buf = handle.read()
    if len(buf) < _PREFIX:
        raise IntegrityError("file shorter than the container prefix")
    magic, version, head_len = struct.unpack_from("<8sIQ", buf, 0)
    if magic != _MAGIC:
        raise FormatError("bad magic; not a model container")
    if version != _VERSION:
        raise FormatError(f"unsupported container version {version}")
    if _PREFIX + head_len > len(buf):
        raise IntegrityError("file truncated inside the header")
    try:
        header = json.loads(buf[_PREFIX:_PREFIX + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise FormatError(f"container header is not valid JSON: {err}") from err
    quantized_meta = header.get("quantized")
    if not isinstance(quantized_meta, dict):
        raise FormatError("quantization table must be an object")
    _check_header(header, quantized_meta)
    offset = _PREFIX + head_len
    raw_blobs = []
    for entry in header["blobs"]:
        raw = buf[offset:offset + entry["bytes"]]
        if len(raw) != entry["bytes"]:
            raise IntegrityError(f"file truncated inside blob {entry['name']!r}")
        if zlib.crc32(raw) != entry["crc"]:
            raise IntegrityError(f"checksum mismatch for blob {entry['name']!r}")
        raw_blobs.append((entry, raw))
        offset += entry["bytes"]
    if offset != len(buf):
        raise FormatError("trailing data after the final blob")
    arrays = {}
    masks = {}
    for entry, raw in raw_blobs:
        shape = tuple(entry["shape"])
        if entry["name"].startswith("mask."):
            bits = np.unpackbits(
                np.frombuffer(raw, dtype=np.uint8), count=math.prod(shape)
            )
            masks[entry["name"][len("mask."):]] = (
                bits.reshape(shape).astype(bool)
            )
        elif entry["dtype"] == "u1":
            arrays[entry["name"]] = (
                np.frombuffer(raw, dtype=np.uint8).reshape(shape).copy()
            )
        else:
            arrays[entry["name"]] = (
                np.frombuffer(raw, dtype="<f8").reshape(shape)
                .astype(np.float64)
            )
    try:
        quantized = {}
        for name, meta in quantized_meta.items():
            q = sparse.QuantizedMatrix(
                arrays[name], float(meta["min"]), float(meta["max"])
            )
            quantized[name] = q
            arrays[name] = sparse.dequantize(q)
        desc = header["model"]
        layers = [
            _layer_from_desc(layer_desc, index, arrays)
            for index, layer_desc in enumerate(desc["layers"])
        ]
        output = cells.OutputLayer(
            _op_from_desc(desc["output"], "out.w", arrays), arrays["out.b"]
        )
        model = cells.LanguageModel(
            arrays["emb"], layers, output, kind=desc["kind"]
        )
        mask = None
        mask_meta = header["mask"]
        if mask_meta is not None:
            if sorted(mask_meta["names"]) != sorted(masks):
                raise FormatError("mask table disagrees with mask blobs")
            mask = sparse.PruneMask(masks, mask_meta["target_sparsity"])
            mask.apply(model)
        elif masks:
            raise FormatError("mask blobs present without a mask table")
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError, IndexError) as err:
        raise FormatError(f"container header inconsistent: {err}") from err
    return StoredModel(model, mask, quantized or None)
