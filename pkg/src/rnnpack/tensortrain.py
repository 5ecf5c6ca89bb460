"""Tensor-train representation of weight matrices.

A rows x cols matrix is reshaped into a d-way tensor by factorizing the
row index over ``row_modes`` and the column index over ``col_modes``, the
two factorizations interleaved pairwise so that core m carries one merged
mode of size row_modes[m] * col_modes[m].  The tensor is then decomposed
into a chain of 3-way cores by repeated truncated SVD of its unfoldings.
Matrix-vector products contract the chain core by core and never build
the dense matrix back.

Parameter count is sum_m r_{m-1} * k_m * r_m, bounded by d * R^2 * K for
rank bound R and largest merged mode K; with small ranks this is far
below rows * cols, which is the entire point.
"""

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from . import counters, numkit
from .errors import ParameterError, ShapeError


@dataclass
class TTMatrix:
    """Chain of 3-way cores; core m has shape (r_{m-1}, k_m, r_m)."""

    rows: int
    cols: int
    row_modes: tuple
    col_modes: tuple
    cores: list = field(repr=False)

    def __post_init__(self):
        self.rows = int(self.rows)
        self.cols = int(self.cols)
        self.row_modes = tuple(int(v) for v in self.row_modes)
        self.col_modes = tuple(int(v) for v in self.col_modes)
        if len(self.row_modes) != len(self.col_modes):
            raise ShapeError("row_modes and col_modes must have the same length")
        if math.prod(self.row_modes) != self.rows:
            raise ShapeError(
                f"row_modes {self.row_modes} do not multiply to {self.rows}"
            )
        if math.prod(self.col_modes) != self.cols:
            raise ShapeError(
                f"col_modes {self.col_modes} do not multiply to {self.cols}"
            )
        if len(self.cores) != len(self.row_modes):
            raise ShapeError(
                f"expected {len(self.row_modes)} cores, got {len(self.cores)}"
            )
        merged = self.merged_modes
        for m, core in enumerate(self.cores):
            if core.ndim != 3 or core.shape[1] != merged[m]:
                raise ShapeError(
                    f"core {m} has shape {core.shape}, expected middle mode {merged[m]}"
                )
            if m and core.shape[0] != self.cores[m - 1].shape[2]:
                raise ShapeError(f"rank mismatch between cores {m - 1} and {m}")
        if self.cores[0].shape[0] != 1 or self.cores[-1].shape[2] != 1:
            raise ShapeError("boundary TT-ranks must be 1")

    @property
    def d(self):
        return len(self.row_modes)

    @property
    def merged_modes(self):
        return tuple(r * c for r, c in zip(self.row_modes, self.col_modes))

    @property
    def ranks(self):
        return (1,) + tuple(core.shape[2] for core in self.cores)

    @property
    def shape(self):
        return (self.rows, self.cols)


def _ordered_factorizations(n, d):
    """All ordered d-tuples of factors >= 2 whose product is n."""
    if d == 1:
        return [(n,)] if n >= 2 else []
    out = []
    f = 2
    while f * (2 ** (d - 1)) <= n:
        if n % f == 0:
            out.extend((f,) + rest for rest in _ordered_factorizations(n // f, d - 1))
        f += 1
    return out


def choose_modes(rows, cols, d):
    """Most balanced mode split: minimize max/min over the merged modes.

    Exhausts every ordered factorization of rows and cols into d factors
    of at least 2 (so prime dimensions cannot be split and raise); ties
    break toward balanced row and column factors individually, then the
    smaller maximal mode, then lexicographically.
    """
    if d < 1:
        raise ParameterError(f"d must be at least 1, got {d}")
    if d == 1:
        return (rows,), (cols,)
    row_opts = _ordered_factorizations(rows, d)
    col_opts = _ordered_factorizations(cols, d)
    if not row_opts or not col_opts:
        bad = rows if not row_opts else cols
        raise ParameterError(
            f"cannot factor {bad} into {d} modes of at least 2 "
            f"(prime or too small for the requested d)"
        )
    best = None
    for rm in row_opts:
        for cm in col_opts:
            merged = tuple(a * b for a, b in zip(rm, cm))
            ratio = max(merged) / min(merged)
            side = max(rm) / min(rm) + max(cm) / min(cm)
            key = (ratio, side, max(merged), rm, cm)
            if best is None or key < best:
                best = key
    return best[3], best[4]


def _interleave(w, row_modes, col_modes):
    d = len(row_modes)
    t = w.reshape(tuple(row_modes) + tuple(col_modes))
    perm = []
    for m in range(d):
        perm.extend((m, d + m))
    merged = tuple(r * c for r, c in zip(row_modes, col_modes))
    return t.transpose(perm).reshape(merged)


def _deinterleave(t, row_modes, col_modes):
    d = len(row_modes)
    pairs = []
    for r, c in zip(row_modes, col_modes):
        pairs.extend((r, c))
    t = t.reshape(pairs)
    perm = list(range(0, 2 * d, 2)) + list(range(1, 2 * d, 2))
    rows = math.prod(row_modes)
    cols = math.prod(col_modes)
    return t.transpose(perm).reshape(rows, cols)


def tt_svd(w, row_modes, col_modes, max_ranks, tol=1e-12):
    """Decompose a dense matrix into TT cores by sequential truncated SVD.

    ``max_ranks`` bounds the internal ranks (a scalar applies everywhere,
    a sequence gives one bound per internal edge).  Singular values below
    ``tol`` relative to the largest at each unfolding are dropped, so
    exactly representable inputs come back with their true TT-ranks even
    under a loose bound.  Truncation error accumulates as the l2 norm of
    everything dropped across unfoldings, keeping the result
    quasi-optimal.
    """
    w = numkit.as_matrix(w, "w")
    row_modes = tuple(int(v) for v in row_modes)
    col_modes = tuple(int(v) for v in col_modes)
    d = len(row_modes)
    if len(col_modes) != d:
        raise ShapeError("row_modes and col_modes must have the same length")
    if math.prod(row_modes) != w.shape[0] or math.prod(col_modes) != w.shape[1]:
        raise ShapeError(
            f"modes {row_modes} x {col_modes} do not match matrix shape {w.shape}"
        )
    if np.isscalar(max_ranks):
        bounds = [int(max_ranks)] * (d - 1)
    else:
        bounds = [int(v) for v in max_ranks]
    if len(bounds) != d - 1:
        raise ParameterError(f"need {d - 1} rank bounds for d={d}, got {len(bounds)}")
    if any(b < 1 for b in bounds):
        raise ParameterError(f"rank bounds must be at least 1, got {bounds}")

    merged = tuple(r * c for r, c in zip(row_modes, col_modes))
    rest = _interleave(w, row_modes, col_modes).reshape(1, -1)
    cores = []
    r_prev = 1
    for m in range(d - 1):
        c = rest.reshape(r_prev * merged[m], -1)
        cap = min(bounds[m], c.shape[0], c.shape[1])
        fac = numkit.truncated_svd(c, cap)
        if fac.s[0] > 0.0:
            keep = max(1, int(np.count_nonzero(fac.s > tol * fac.s[0])))
        else:
            keep = 1
        cores.append(
            np.ascontiguousarray(fac.u[:, :keep]).reshape(r_prev, merged[m], keep)
        )
        rest = fac.s[:keep, None] * fac.vt[:keep]
        r_prev = keep
    cores.append(rest.reshape(r_prev, merged[-1], 1))
    return TTMatrix(w.shape[0], w.shape[1], row_modes, col_modes, cores)


def tt_reconstruct(tt):
    """Densify (diagnostics and tests only; the compute path never does)."""
    cur = tt.cores[0].reshape(tt.merged_modes[0], -1)
    for core in tt.cores[1:]:
        r_prev, k, r_next = core.shape
        cur = cur @ core.reshape(r_prev, k * r_next)
        cur = cur.reshape(-1, r_next)
    return _deinterleave(cur.reshape(tt.merged_modes), tt.row_modes, tt.col_modes)


def tt_element(tt, i, j):
    """Single entry as the product of one slice per core."""
    if not (0 <= i < tt.rows and 0 <= j < tt.cols):
        raise ParameterError(f"index ({i}, {j}) outside {tt.rows} x {tt.cols}")
    row_idx = np.unravel_index(i, tt.row_modes)
    col_idx = np.unravel_index(j, tt.col_modes)
    v = None
    for m, core in enumerate(tt.cores):
        sl = core[:, row_idx[m] * tt.col_modes[m] + col_idx[m], :]
        v = sl if v is None else v @ sl
    return float(v[0, 0])


def _as_batch(x, width, name="x"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        if x.shape[0] != width:
            raise ShapeError(f"{name} length {x.shape[0]} != {width}")
        return x[None, :], True
    if x.ndim == 2:
        if x.shape[1] != width:
            raise ShapeError(f"{name} width {x.shape[1]} != {width}")
        return x, False
    raise ShapeError(f"{name} must be 1-D or 2-D, got shape {x.shape}")


def tt_matvec(tt, x):
    """y = W @ x without densifying W; x may carry a leading batch axis."""
    xb, single = _as_batch(x, tt.cols)
    B = xb.shape[0]
    cur = xb.reshape(B, 1, 1, tt.cols)
    I = 1
    crem = tt.cols
    for m in range(tt.d):
        rm = tt.row_modes[m]
        cm = tt.col_modes[m]
        r_prev, _, r_next = tt.cores[m].shape
        crest = crem // cm
        counters.add_macs(B * I * r_prev * cm * crest * rm * r_next)
        core4 = tt.cores[m].reshape(r_prev, rm, cm, r_next)
        cur = np.einsum(
            "bipcq,pjcs->bijsq", cur.reshape(B, I, r_prev, cm, crest), core4
        )
        I *= rm
        crem = crest
        cur = cur.reshape(B, I, r_next, crem)
    y = cur.reshape(B, tt.rows)
    return y[0] if single else y


def tt_matvec_vjp(tt, x, grad_y):
    """Gradients of y = W @ x: returns (grad_cores, grad_x).

    Replays the forward contraction keeping each intermediate, then walks
    the chain backwards; the gradient of core m contracts the saved
    intermediate against the incoming cotangent, which is the adjoint of
    the forward einsum with core m left out.  Costs a constant factor of
    the forward pass.
    """
    xb, single = _as_batch(x, tt.cols)
    gyb, _ = _as_batch(grad_y, tt.rows, name="grad_y")
    if gyb.shape[0] != xb.shape[0]:
        raise ShapeError("x and grad_y batch sizes differ")
    B = xb.shape[0]

    saved = []
    dims = []
    cur = xb.reshape(B, 1, 1, tt.cols)
    I = 1
    crem = tt.cols
    for m in range(tt.d):
        rm = tt.row_modes[m]
        cm = tt.col_modes[m]
        r_prev, _, r_next = tt.cores[m].shape
        crest = crem // cm
        cur5 = cur.reshape(B, I, r_prev, cm, crest)
        saved.append(cur5)
        dims.append((I, r_prev, cm, crest, rm, r_next))
        core4 = tt.cores[m].reshape(r_prev, rm, cm, r_next)
        cur = np.einsum("bipcq,pjcs->bijsq", cur5, core4)
        I *= rm
        crem = crest
        cur = cur.reshape(B, I, r_next, crem)

    grad_cores = [None] * tt.d
    gcur = gyb.reshape(B, I, 1, crem)
    for m in range(tt.d - 1, -1, -1):
        I, r_prev, cm, crest, rm, r_next = dims[m]
        core4 = tt.cores[m].reshape(r_prev, rm, cm, r_next)
        g5 = gcur.reshape(B, I, rm, r_next, crest)
        gcore = np.einsum("bipcq,bijsq->pjcs", saved[m], g5)
        grad_cores[m] = np.ascontiguousarray(gcore.reshape(r_prev, rm * cm, r_next))
        gcur = np.einsum("bijsq,pjcs->bipcq", g5, core4).reshape(
            B, I, r_prev, cm * crest
        )
    grad_x = gcur.reshape(B, tt.cols)
    return grad_cores, (grad_x[0] if single else grad_x)


def tt_param_count(tt):
    return int(sum(core.size for core in tt.cores))


def tt_mac_count(tt):
    """Exact MACs of one unbatched tt_matvec, from the contraction shapes."""
    total = 0
    I = 1
    crem = tt.cols
    for m in range(tt.d):
        rm = tt.row_modes[m]
        cm = tt.col_modes[m]
        r_prev, _, r_next = tt.cores[m].shape
        crest = crem // cm
        total += I * r_prev * cm * crest * rm * r_next
        I *= rm
        crem = crest
    return int(total)


def tt_matvec_t(tt, grad_y):
    """Transpose product dense_reconstruct(tt).T @ grad_y, chain-contracted.

    This is the input cotangent of tt_matvec; it needs no forward replay
    because the map is linear in x.
    """
    gyb, single = _as_batch(grad_y, tt.rows, name="grad_y")
    B = gyb.shape[0]
    dims = []
    I = 1
    crem = tt.cols
    for m in range(tt.d):
        cm = tt.col_modes[m]
        r_prev, _, r_next = tt.cores[m].shape
        crest = crem // cm
        dims.append((I, r_prev, cm, crest, tt.row_modes[m], r_next))
        I *= tt.row_modes[m]
        crem = crest
    gcur = gyb.reshape(B, I, 1, crem)
    for m in range(tt.d - 1, -1, -1):
        I, r_prev, cm, crest, rm, r_next = dims[m]
        core4 = tt.cores[m].reshape(r_prev, rm, cm, r_next)
        g5 = gcur.reshape(B, I, rm, r_next, crest)
        gcur = np.einsum("bijsq,pjcs->bipcq", g5, core4).reshape(
            B, I, r_prev, cm * crest
        )
    out = gcur.reshape(B, tt.cols)
    return out[0] if single else out


class TtLinear:
    """A TTMatrix as a linear operator for recurrent layers.

    Implements the same protocol as cells.DenseLinear: apply,
    backward_input, param_grads, param_arrays, mac_count.  Trainable
    parameters are the cores, exposed as ``cores.0`` .. ``cores.{d-1}``.
    """

    is_dense = False

    def __init__(self, tt):
        if not isinstance(tt, TTMatrix):
            raise ParameterError("TtLinear wraps a TTMatrix")
        self.tt = tt

    @property
    def out_dim(self):
        return self.tt.rows

    @property
    def in_dim(self):
        return self.tt.cols

    def apply(self, x):
        return tt_matvec(self.tt, x)

    def backward_input(self, gy):
        return tt_matvec_t(self.tt, gy)

    def param_grads(self, x, gy):
        grad_cores, _ = tt_matvec_vjp(self.tt, x, gy)
        return {f"cores.{m}": g for m, g in enumerate(grad_cores)}

    def param_arrays(self):
        return {f"cores.{m}": core for m, core in enumerate(self.tt.cores)}

    def mac_count(self):
        return tt_mac_count(self.tt)


def tt_from_dense(w, d, max_ranks, row_modes=None, col_modes=None):
    """Decompose a dense matrix, choosing balanced modes unless given."""
    w = np.asarray(w, dtype=np.float64)
    if (row_modes is None) != (col_modes is None):
        raise ParameterError("give both row_modes and col_modes or neither")
    if row_modes is None:
        row_modes, col_modes = choose_modes(w.shape[0], w.shape[1], d)
    return tt_svd(w, row_modes, col_modes, max_ranks)


def tt_compress_model(model, d=4, max_ranks=4, compress_output=False,
                      compress_cells=True):
    """Replace every dense gate matrix (and optionally the output matrix)
    by its TT decomposition; embedding and biases are copied unchanged.

    The output matrix is only factorizable when the vocabulary size
    splits into d modes, so it stays dense unless asked for.  Setting
    ``compress_cells=False`` leaves the recurrent layers alone, which
    is how an output-only compression is expressed.
    """
    from . import cells

    if not compress_cells and not compress_output:
        raise ParameterError("nothing selected for TT compression")
    new_layers = []
    for layer in model.layers:
        if not compress_cells:
            new_layers.append(copy.deepcopy(layer))
            continue
        if layer.proj is not None:
            raise ParameterError("cannot TT-compress a projected layer")
        ops = {}
        for name, op in layer.ops.items():
            if not getattr(op, "is_dense", False):
                raise ParameterError(f"operator {name} is not dense")
            ops[name] = TtLinear(tt_from_dense(op.w, d, max_ranks))
        bias = {k: v.copy() for k, v in layer.bias.items()}
        if layer.kind == "gru":
            new_layers.append(
                cells.GruLayer(ops, bias, blend_input=layer.blend_input)
            )
        else:
            new_layers.append(type(layer)(ops, bias))
    output = model.output
    if compress_output:
        output = cells.OutputLayer(
            TtLinear(tt_from_dense(output.w, d, max_ranks)), output.b.copy()
        )
    else:
        output = copy.deepcopy(model.output)
    return cells.LanguageModel(
        model.embedding.copy(), new_layers, output, kind=model.kind
    )
