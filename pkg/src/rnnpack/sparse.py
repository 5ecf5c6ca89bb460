"""Magnitude pruning and 8-bit linear quantization.

Pruning removes the smallest-magnitude entries of each weight matrix
independently (per-matrix thresholds, so one badly scaled matrix cannot
eat the whole budget) and records keep-masks; fine-tuning re-applies
the masks after every update so pruned connections stay exactly zero.

Quantization maps each matrix affinely onto 256 equal intervals and
stores one unsigned byte per entry plus the (min, max) range.  It is a
storage transform only: compute always dequantizes back to floats.
Dequantization returns interval midpoints, which minimizes the
worst-case error for equal intervals, so a round trip moves no entry
by more than (max - min) / 512.

Size accounting (4 bytes per stored float):

* pruned matrix: 4 * nonzeros + numel / 8 bytes of mask bits
* quantized matrix: numel bytes + 8 bytes for the range
"""

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ParameterError, ShapeError

FLOAT_BYTES = 4
QUANT_HEADER_BYTES = 8


def _named_arrays(weights):
    if hasattr(weights, "param_arrays"):
        return weights.param_arrays()
    return dict(weights)


def _matches(name, key):
    return name == key or name.startswith(key + ".")


def _sparsity_map(arrays, target):
    """Resolve a float or {component: fraction} map to per-matrix targets."""
    matrices = {n: a for n, a in arrays.items() if a.ndim == 2}
    if not isinstance(target, dict):
        frac = float(target)
        if not 0.0 <= frac < 1.0:
            raise ParameterError("sparsity must lie in [0, 1)")
        return {n: frac for n in matrices}
    out = {}
    for key, frac in target.items():
        frac = float(frac)
        if not 0.0 <= frac < 1.0:
            raise ParameterError(f"sparsity for {key!r} must lie in [0, 1)")
        hits = [n for n in matrices if _matches(n, key)]
        if not hits:
            raise ParameterError(f"{key!r} matches no weight matrix")
        for n in hits:
            out[n] = frac
    return out


@dataclass
class PruneMask:
    """Keep-masks (True = connection survives) plus the requested target."""

    masks: dict
    target_sparsity: object

    def __post_init__(self):
        self.masks = {n: np.asarray(m, dtype=bool) for n, m in self.masks.items()}

    def sparsity(self):
        """Achieved zero fraction over the masked matrices."""
        total = sum(m.size for m in self.masks.values())
        if total == 0:
            return 0.0
        kept = sum(int(m.sum()) for m in self.masks.values())
        return 1.0 - kept / total

    def apply(self, weights):
        """Zero the pruned entries in place."""
        arrays = _named_arrays(weights)
        for name, mask in self.masks.items():
            if name not in arrays:
                raise ParameterError(f"mask refers to unknown weights {name!r}")
            arr = arrays[name]
            if arr.shape != mask.shape:
                raise ShapeError(f"mask shape differs for {name!r}")
            arr[~mask] = 0.0


def _keep_mask(w, frac):
    n_zero = int(round(w.size * frac))
    mask = np.ones(w.size, dtype=bool)
    if n_zero:
        # stable order resolves magnitude ties by index
        order = np.argsort(np.abs(w), axis=None, kind="stable")
        mask[order[:n_zero]] = False
    return mask.reshape(w.shape)


def prune(weights, target_sparsity):
    """Keep-masks zeroing the smallest-magnitude fraction of each matrix.

    ``target_sparsity`` is either one fraction for every weight matrix
    or a map from component name (a parameter name or prefix, e.g.
    ``"out"`` or ``"layers.0"``) to a fraction; unmapped matrices are
    left untouched.
    """
    arrays = _named_arrays(weights)
    per_matrix = _sparsity_map(arrays, target_sparsity)
    masks = {n: _keep_mask(arrays[n], frac) for n, frac in per_matrix.items()}
    return PruneMask(masks, target_sparsity)


def finetune_pruned(model, mask, data, config):
    """Train further while forcing pruned connections to stay zero."""
    from . import langmodel

    mask.apply(model)
    return langmodel.train_model(
        model, data, config, post_update=lambda: mask.apply(model)
    )


@dataclass
class QuantizedMatrix:
    """8-bit codes plus the range they index into."""

    codes: np.ndarray
    min_val: float
    max_val: float

    def __post_init__(self):
        self.codes = np.asarray(self.codes)
        if self.codes.dtype != np.uint8 or self.codes.ndim != 2:
            raise ShapeError("codes must be a 2-D uint8 array")
        self.min_val = float(self.min_val)
        self.max_val = float(self.max_val)
        if not (np.isfinite(self.min_val) and np.isfinite(self.max_val)):
            raise NumericError("quantization range must be finite")
        if self.max_val < self.min_val:
            raise ParameterError("max_val must not be below min_val")
        if self.max_val == self.min_val and self.codes.any():
            raise ParameterError("constant range requires all-zero codes")

    @property
    def rows(self):
        return self.codes.shape[0]

    @property
    def cols(self):
        return self.codes.shape[1]

    def size_bytes(self):
        return self.codes.size + QUANT_HEADER_BYTES


def quantize(w):
    """Map a matrix onto 256 equal intervals of its own range."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ShapeError("quantize expects a 2-D matrix")
    if not np.all(np.isfinite(w)):
        raise NumericError("quantize requires finite entries")
    lo = float(w.min()) if w.size else 0.0
    hi = float(w.max()) if w.size else 0.0
    if hi == lo:
        return QuantizedMatrix(np.zeros(w.shape, dtype=np.uint8), lo, hi)
    delta = (hi - lo) / 256.0
    # nearest interval midpoint; exact edge ties go to the even code
    codes = np.rint((w - lo) / delta - 0.5)
    codes = np.clip(codes, 0, 255).astype(np.uint8)
    return QuantizedMatrix(codes, lo, hi)


def dequantize(q):
    """Interval midpoints for the stored codes."""
    if q.max_val == q.min_val:
        return np.full(q.codes.shape, q.min_val)
    delta = (q.max_val - q.min_val) / 256.0
    return q.min_val + (q.codes.astype(np.float64) + 0.5) * delta


def quantize_arrays(weights, components=None):
    """Quantize weight matrices; returns {name: QuantizedMatrix}.

    ``components`` optionally restricts the set, as parameter names or
    prefixes; by default every 2-D matrix is covered.
    """
    arrays = _named_arrays(weights)
    matrices = {n: a for n, a in arrays.items() if a.ndim == 2}
    if components is None:
        return {n: quantize(a) for n, a in matrices.items()}
    out = {}
    for key in components:
        hits = [n for n in matrices if _matches(n, key)]
        if not hits:
            raise ParameterError(f"{key!r} matches no weight matrix")
        for n in hits:
            out.setdefault(n, quantize(matrices[n]))
    return out


def dequantize_into(weights, quantized):
    """Overwrite the named matrices with their dequantized values."""
    arrays = _named_arrays(weights)
    for name, q in quantized.items():
        if name not in arrays:
            raise ParameterError(f"quantized entry names unknown weights {name!r}")
        arr = arrays[name]
        if arr.shape != q.codes.shape:
            raise ShapeError(f"quantized shape differs for {name!r}")
        arr[:] = dequantize(q)


def quantized_size_bytes(weights):
    """Bytes to store the model with all matrices quantized: one byte per
    matrix entry, 8 bytes per matrix for the range, floats elsewhere."""
    arrays = _named_arrays(weights)
    total = 0
    for a in arrays.values():
        if a.ndim == 2:
            total += a.size + QUANT_HEADER_BYTES
        else:
            total += a.size * FLOAT_BYTES
    return total


def pruned_size_bytes(weights, mask):
    """Bytes to store the model sparsely: floats for surviving entries,
    one mask bit per pruned-matrix entry, dense floats elsewhere."""
    arrays = _named_arrays(weights)
    total = 0
    for name, a in arrays.items():
        if name in mask.masks:
            kept = int(mask.masks[name].sum())
            total += kept * FLOAT_BYTES + (a.size + 7) // 8
        else:
            total += a.size * FLOAT_BYTES
    return total
