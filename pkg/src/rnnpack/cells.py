"""Recurrent cells (RNN, LSTM, GRU) with manual backpropagation through time.

Layers are wired from linear operators.  An operator maps an input batch
through a weight object and knows its own vector-Jacobian products, so
the same layer code runs dense matrices, low-rank pairs, or tensor-train
chains; the layer never inspects the weight representation.  When every
operator in a layer is a plain dense matrix and no shared projection is
present, the forward and backward windows are routed through the
sequential window kernels selected by :mod:`rnnpack.backend`; everything
else takes a generic per-step path built on the operator protocol.

Conventions fixed here and relied on everywhere else:

* recurrent candidate activation is tanh, gates are logistic sigmoid;
* LSTM cell update is c_t = f * c_prev + i * tanh(...), h_t = o * tanh(c_t)
  with the input gate applied elementwise;
* the GRU blend is (1 - z) * h_prev + z * candidate by default, with a
  ``blend_input`` switch that blends the layer input instead;
* loss is mean cross-entropy in nats over the steps of a window.

MAC counters (see :mod:`rnnpack.counters`) tally multiply-accumulates of
matrix products only; elementwise gate arithmetic and bias adds are not
counted.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import backend, counters, numkit
from .errors import ParameterError, ShapeError


def sigmoid(x):
    """Logistic function, stable for large |x|."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(logits):
    """Max-subtracted softmax along the last axis."""
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


class DenseLinear:
    """A dense matrix as a linear operator with explicit VJPs.

    ``w`` has shape (out_dim, in_dim) and is shared by reference, so
    in-place optimizer updates through :meth:`param_arrays` are seen by
    the operator.
    """

    is_dense = True

    def __init__(self, w):
        self.w = numkit.as_matrix(w, "w")

    @property
    def out_dim(self):
        return self.w.shape[0]

    @property
    def in_dim(self):
        return self.w.shape[1]

    def apply(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise ShapeError(
                f"operator input has width {x.shape[-1]}, expected {self.in_dim}"
            )
        counters.add_macs(self.w.size * max(1, math.prod(x.shape[:-1])))
        return x @ self.w.T

    def backward_input(self, gy):
        return np.asarray(gy) @ self.w

    def param_grads(self, x, gy):
        x = np.atleast_2d(np.asarray(x))
        gy = np.atleast_2d(np.asarray(gy))
        return {"w": gy.T @ x}

    def param_arrays(self):
        return {"w": self.w}

    def mac_count(self):
        return self.w.size


# ---------------------------------------------------------------------------
# dense per-gate weight containers and single-step reference operations


@dataclass
class RnnCellWeights:
    """w: (k, k_in), u: (k, k), b: (k,)."""

    w: np.ndarray
    u: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.w = numkit.as_matrix(self.w, "w")
        self.u = numkit.as_matrix(self.u, "u")
        self.b = np.asarray(self.b, dtype=np.float64)
        k = self.w.shape[0]
        if self.u.shape != (k, k) or self.b.shape != (k,):
            raise ShapeError("inconsistent RNN cell weight shapes")


_LSTM_GATES = ("i", "f", "c", "o")


@dataclass
class LstmCellWeights:
    """Four input matrices (k, k_in), four recurrent (k, k), four biases."""

    w_i: np.ndarray
    w_f: np.ndarray
    w_c: np.ndarray
    w_o: np.ndarray
    u_i: np.ndarray
    u_f: np.ndarray
    u_c: np.ndarray
    u_o: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_c: np.ndarray
    b_o: np.ndarray

    def __post_init__(self):
        k, k_in = numkit.as_matrix(self.w_i, "w_i").shape
        for g in _LSTM_GATES:
            w = numkit.as_matrix(getattr(self, "w_" + g), "w_" + g)
            u = numkit.as_matrix(getattr(self, "u_" + g), "u_" + g)
            b = np.asarray(getattr(self, "b_" + g), dtype=np.float64)
            if w.shape != (k, k_in) or u.shape != (k, k) or b.shape != (k,):
                raise ShapeError(f"inconsistent LSTM weight shapes for gate {g}")
            setattr(self, "w_" + g, w)
            setattr(self, "u_" + g, u)
            setattr(self, "b_" + g, b)


_GRU_GATES = ("z", "r", "h")


@dataclass
class GruCellWeights:
    """Gate matrices for update (z), reset (r), and candidate (h).

    Biases are optional as a group; ``None`` means the gate equations
    carry no bias term at all.
    """

    w_z: np.ndarray
    w_r: np.ndarray
    w_h: np.ndarray
    u_z: np.ndarray
    u_r: np.ndarray
    u_h: np.ndarray
    b_z: np.ndarray = None
    b_r: np.ndarray = None
    b_h: np.ndarray = None

    def __post_init__(self):
        k, k_in = numkit.as_matrix(self.w_z, "w_z").shape
        have_bias = [getattr(self, "b_" + g) is not None for g in _GRU_GATES]
        if any(have_bias) != all(have_bias):
            raise ParameterError("GRU biases must be present for all gates or none")
        for g in _GRU_GATES:
            w = numkit.as_matrix(getattr(self, "w_" + g), "w_" + g)
            u = numkit.as_matrix(getattr(self, "u_" + g), "u_" + g)
            if w.shape != (k, k_in) or u.shape != (k, k):
                raise ShapeError(f"inconsistent GRU weight shapes for gate {g}")
            setattr(self, "w_" + g, w)
            setattr(self, "u_" + g, u)
            b = getattr(self, "b_" + g)
            if b is not None:
                b = np.asarray(b, dtype=np.float64)
                if b.shape != (k,):
                    raise ShapeError(f"bad GRU bias shape for gate {g}")
                setattr(self, "b_" + g, b)

    @property
    def has_bias(self):
        return self.b_z is not None


def rnn_step(weights, x_in, h_prev):
    """h = tanh(W x + U h_prev + b)."""
    if weights.w.shape[1] != len(x_in) or weights.u.shape[1] != len(h_prev):
        raise ShapeError("rnn_step input dims do not match weights")
    return np.tanh(weights.w @ x_in + weights.u @ h_prev + weights.b)


def lstm_step(weights, x_in, h_prev, c_prev):
    """One LSTM update; returns (h, c)."""
    if weights.w_i.shape[1] != len(x_in) or weights.u_i.shape[1] != len(h_prev):
        raise ShapeError("lstm_step input dims do not match weights")
    i = sigmoid(weights.w_i @ x_in + weights.u_i @ h_prev + weights.b_i)
    f = sigmoid(weights.w_f @ x_in + weights.u_f @ h_prev + weights.b_f)
    g = np.tanh(weights.w_c @ x_in + weights.u_c @ h_prev + weights.b_c)
    o = sigmoid(weights.w_o @ x_in + weights.u_o @ h_prev + weights.b_o)
    c = f * np.asarray(c_prev) + i * g
    h = o * np.tanh(c)
    return h, c


def gru_step(weights, x_in, h_prev, blend_input=False):
    """One GRU update.

    The default final blend interpolates between the previous state and
    the candidate; ``blend_input=True`` interpolates between the layer
    input and the candidate instead (requires matching widths).
    """
    if weights.w_z.shape[1] != len(x_in) or weights.u_z.shape[1] != len(h_prev):
        raise ShapeError("gru_step input dims do not match weights")
    bz = weights.b_z if weights.has_bias else 0.0
    br = weights.b_r if weights.has_bias else 0.0
    bh = weights.b_h if weights.has_bias else 0.0
    z = sigmoid(weights.w_z @ x_in + weights.u_z @ h_prev + bz)
    r = sigmoid(weights.w_r @ x_in + weights.u_r @ h_prev + br)
    g = np.tanh(weights.w_h @ x_in + weights.u_h @ (r * h_prev) + bh)
    base = np.asarray(x_in) if blend_input else np.asarray(h_prev)
    if blend_input and base.shape != g.shape:
        raise ShapeError("blend_input requires input width equal to state width")
    return (1.0 - z) * base + z * g


# ---------------------------------------------------------------------------
# layers


def _as_ops(kind, container):
    """Wrap a dense weight container's matrices as operators."""
    if kind == "rnn":
        names = ("w", "u")
    elif kind == "lstm":
        names = tuple("w_" + g for g in _LSTM_GATES) + tuple(
            "u_" + g for g in _LSTM_GATES
        )
    else:
        names = tuple("w_" + g for g in _GRU_GATES) + tuple(
            "u_" + g for g in _GRU_GATES
        )
    return {n: DenseLinear(getattr(container, n)) for n in names}


def _all_dense(ops):
    return all(getattr(op, "is_dense", False) for op in ops.values())


class _LayerBase:
    """Shared plumbing: parameter naming, MAC accounting, state helpers.

    ``ops`` maps gate names to linear operators; ``bias`` maps bias names
    to vectors (absent names mean no bias term).  ``proj`` is an optional
    shared projection applied to the hidden state; when present the layer
    emits the projected stream and feeds it back as the recurrent input,
    so a single factor is tied across every gate and the layer boundary.
    """

    kind = None

    def __init__(self, ops, bias, proj=None):
        self.ops = dict(ops)
        self.bias = {k: np.asarray(v, dtype=np.float64) for k, v in bias.items()}
        self.proj = proj
        dims_in = {op.in_dim for n, op in self.ops.items() if n.startswith("w")}
        dims_k = {op.out_dim for op in self.ops.values()}
        if len(dims_in) != 1 or len(dims_k) != 1:
            raise ShapeError("layer operators disagree on dimensions")
        self.in_dim = dims_in.pop()
        self.state_dim = dims_k.pop()
        rec_in = {op.in_dim for n, op in self.ops.items() if n.startswith("u")}
        width = self.state_dim if proj is None else proj.out_dim
        if proj is not None and proj.in_dim != self.state_dim:
            raise ShapeError("projection input width must equal the state width")
        if rec_in != {width}:
            raise ShapeError("recurrent operators must consume the emitted stream")
        self.out_dim = width

    def param_arrays(self):
        out = {}
        for name in sorted(self.ops):
            for sub, arr in self.ops[name].param_arrays().items():
                key = name if sub == "w" else f"{name}.{sub}"
                out[key] = arr
        for name in sorted(self.bias):
            out[name] = self.bias[name]
        if self.proj is not None:
            out["proj"] = self.proj.w
        return out

    def _op_grads(self, name, x, gy, out):
        for sub, arr in self.ops[name].param_grads(x, gy).items():
            key = name if sub == "w" else f"{name}.{sub}"
            out[key] = out[key] + arr if key in out else arr

    def mac_count_per_step(self):
        """Multiply-accumulates per emitted step, matrix products only."""
        total = sum(op.mac_count() for op in self.ops.values())
        if self.proj is not None:
            total += self.proj.mac_count()
        return total

    def _fast(self):
        return self.proj is None and _all_dense(self.ops)

    def _emit(self, h):
        return self.proj.apply(h) if self.proj is not None else h


class RnnLayer(_LayerBase):
    kind = "rnn"

    @classmethod
    def from_weights(cls, weights, proj=None):
        return cls(_as_ops("rnn", weights), {"b": weights.b}, proj)

    def init_state(self):
        if self.proj is None:
            return np.zeros(self.state_dim)
        return np.zeros(self.state_dim), np.zeros(self.out_dim)

    def _split_state(self, state):
        # projected layers carry (h, emitted) so windows never redo P h0;
        # a bare h is accepted and costs one projection apply
        if self.proj is None:
            h0 = np.asarray(state, dtype=np.float64)
            return h0, h0
        if isinstance(state, tuple):
            h0, m0 = state
            return (np.asarray(h0, dtype=np.float64),
                    np.asarray(m0, dtype=np.float64))
        h0 = np.asarray(state, dtype=np.float64)
        return h0, self._emit(h0)

    def forward_window(self, x_seq, state, want_cache=True):
        x_seq = np.asarray(x_seq, dtype=np.float64)
        T = x_seq.shape[0]
        if T == 0:
            return np.zeros((0, self.out_dim)), state, None
        h0, m0 = self._split_state(state)
        gx = self.ops["w"].apply(x_seq) + self.bias["b"]
        if self._fast():
            u = self.ops["u"].w
            counters.add_macs(T * u.size)
            h_seq = backend.kernels().rnn_window_forward(gx, u, h0)
            cache = ("fast", x_seq, gx, h_seq, h0) if want_cache else None
            return h_seq, h_seq[-1].copy(), cache
        m = m0
        h_seq = np.empty((T, self.state_dim))
        m_seq = np.empty((T, self.out_dim))
        for t in range(T):
            h = np.tanh(gx[t] + self.ops["u"].apply(m))
            m = self._emit(h)
            h_seq[t] = h
            m_seq[t] = m
        if self.proj is not None:
            out = m_seq
            state_out = (h_seq[-1].copy(), m_seq[-1].copy())
        else:
            out = h_seq
            state_out = h_seq[-1].copy()
        cache = ("slow", x_seq, h_seq, m_seq, h0, m0) if want_cache else None
        return out, state_out, cache

    def backward_window(self, cache, grad_out):
        grads = {}
        if cache[0] == "fast":
            _, x_seq, gx, h_seq, h0 = cache
            ggx, grad_u, carry = backend.kernels().rnn_window_backward(
                np.asarray(grad_out, dtype=np.float64), h_seq, self.ops["u"].w, h0
            )
            grads["u"] = grad_u
            self._op_grads("w", x_seq, ggx, grads)
            grads["b"] = ggx.sum(axis=0)
            return self.ops["w"].backward_input(ggx), grads, carry
        _, x_seq, h_seq, m_seq, h0, m0 = cache
        T = x_seq.shape[0]
        m_prevs = np.vstack([m0[None, :], m_seq[:-1]])
        ga_seq = np.empty((T, self.state_dim))
        gm_seq = np.empty((T, self.out_dim))
        gm_next = np.zeros(self.out_dim)
        for t in range(T - 1, -1, -1):
            gm = np.asarray(grad_out[t]) + gm_next
            gm_seq[t] = gm
            gh = self.proj.backward_input(gm) if self.proj is not None else gm
            ga = gh * (1.0 - h_seq[t] * h_seq[t])
            ga_seq[t] = ga
            gm_next = self.ops["u"].backward_input(ga)
        self._op_grads("w", x_seq, ga_seq, grads)
        self._op_grads("u", m_prevs, ga_seq, grads)
        grads["b"] = ga_seq.sum(axis=0)
        if self.proj is not None:
            # gm_next now holds the gradient reaching m(-1) = proj(h0)
            grads["proj"] = self.proj.param_grads(
                np.vstack([h0[None, :], h_seq]), np.vstack([gm_next[None, :], gm_seq])
            )["w"]
            carry = self.proj.backward_input(gm_next)
        else:
            carry = gm_next
        return self.ops["w"].backward_input(ga_seq), grads, carry


class LstmLayer(_LayerBase):
    kind = "lstm"

    @classmethod
    def from_weights(cls, weights, proj=None):
        bias = {"b_" + g: getattr(weights, "b_" + g) for g in _LSTM_GATES}
        return cls(_as_ops("lstm", weights), bias, proj)

    def init_state(self):
        zeros = np.zeros(self.state_dim), np.zeros(self.state_dim)
        if self.proj is None:
            return zeros
        return zeros + (np.zeros(self.out_dim),)

    def _split_state(self, state):
        # projected layers carry (h, c, emitted); a bare (h, c) is
        # accepted and costs one projection apply
        h0 = np.asarray(state[0], dtype=np.float64)
        c0 = np.asarray(state[1], dtype=np.float64)
        if self.proj is None:
            return h0, c0, h0
        if len(state) == 3:
            return h0, c0, np.asarray(state[2], dtype=np.float64)
        return h0, c0, self._emit(h0)

    def _input_side(self, x_seq):
        return {
            g: self.ops["w_" + g].apply(x_seq) + self.bias["b_" + g]
            for g in _LSTM_GATES
        }

    def forward_window(self, x_seq, state, want_cache=True):
        x_seq = np.asarray(x_seq, dtype=np.float64)
        T = x_seq.shape[0]
        if T == 0:
            return np.zeros((0, self.out_dim)), state, None
        h0, c0, m0 = self._split_state(state)
        k = self.state_dim
        if self._fast():
            wx = np.vstack([self.ops["w_" + g].w for g in _LSTM_GATES])
            bx = np.concatenate([self.bias["b_" + g] for g in _LSTM_GATES])
            u = np.vstack([self.ops["u_" + g].w for g in _LSTM_GATES])
            counters.add_macs(T * wx.size)
            gx = x_seq @ wx.T + bx
            counters.add_macs(T * u.size)
            h_seq, c_seq, gates = backend.kernels().lstm_window_forward(gx, u, h0, c0)
            cache = ("fast", x_seq, gates, h_seq, c_seq, h0, c0) if want_cache else None
            return h_seq, (h_seq[-1].copy(), c_seq[-1].copy()), cache
        gx = self._input_side(x_seq)
        m = m0
        h_seq = np.empty((T, k))
        c_seq = np.empty((T, k))
        m_seq = np.empty((T, self.out_dim))
        gates = {g: np.empty((T, k)) for g in _LSTM_GATES}
        h, c = h0, c0
        for t in range(T):
            i = sigmoid(gx["i"][t] + self.ops["u_i"].apply(m))
            f = sigmoid(gx["f"][t] + self.ops["u_f"].apply(m))
            g = np.tanh(gx["c"][t] + self.ops["u_c"].apply(m))
            o = sigmoid(gx["o"][t] + self.ops["u_o"].apply(m))
            c = f * c + i * g
            h = o * np.tanh(c)
            m = self._emit(h)
            for name, val in zip(_LSTM_GATES, (i, f, g, o)):
                gates[name][t] = val
            h_seq[t], c_seq[t], m_seq[t] = h, c, m
        if self.proj is not None:
            out = m_seq
            state_out = (h_seq[-1].copy(), c_seq[-1].copy(), m_seq[-1].copy())
        else:
            out = h_seq
            state_out = (h_seq[-1].copy(), c_seq[-1].copy())
        cache = (
            ("slow", x_seq, gates, h_seq, c_seq, m_seq, h0, c0, m0)
            if want_cache
            else None
        )
        return out, state_out, cache

    def backward_window(self, cache, grad_out):
        grads = {}
        grad_out = np.asarray(grad_out, dtype=np.float64)
        if cache[0] == "fast":
            _, x_seq, gates, h_seq, c_seq, h0, c0 = cache
            u = np.vstack([self.ops["u_" + g].w for g in _LSTM_GATES])
            ggx, grad_u, carry_h, carry_c = backend.kernels().lstm_window_backward(
                grad_out, gates, h_seq, c_seq, u, h0, c0
            )
            k = self.state_dim
            for j, g in enumerate(_LSTM_GATES):
                sl = ggx[:, j * k : (j + 1) * k]
                self._op_grads("w_" + g, x_seq, sl, grads)
                grads["u_" + g] = grad_u[j * k : (j + 1) * k]
                grads["b_" + g] = sl.sum(axis=0)
            gx_grad = np.zeros_like(x_seq)
            for j, g in enumerate(_LSTM_GATES):
                gx_grad += self.ops["w_" + g].backward_input(
                    ggx[:, j * k : (j + 1) * k]
                )
            return gx_grad, grads, (carry_h, carry_c)
        _, x_seq, gates, h_seq, c_seq, m_seq, h0, c0, m0 = cache
        T, k = h_seq.shape
        m_prevs = np.vstack([m0[None, :], m_seq[:-1]])
        ga = {g: np.empty((T, k)) for g in _LSTM_GATES}
        gm_seq = np.empty((T, self.out_dim))
        gm_next = np.zeros(self.out_dim)
        gc = np.zeros(k)
        for t in range(T - 1, -1, -1):
            gm = grad_out[t] + gm_next
            gm_seq[t] = gm
            gh = self.proj.backward_input(gm) if self.proj is not None else gm
            i, f, g, o = (gates[name][t] for name in _LSTM_GATES)
            tc = np.tanh(c_seq[t])
            gc = gc + gh * o * (1.0 - tc * tc)
            c_prev = c_seq[t - 1] if t > 0 else c0
            ga["i"][t] = gc * g * i * (1.0 - i)
            ga["f"][t] = gc * c_prev * f * (1.0 - f)
            ga["c"][t] = gc * i * (1.0 - g * g)
            ga["o"][t] = gh * tc * o * (1.0 - o)
            gc = gc * f
            gm_next = np.zeros(self.out_dim)
            for name in _LSTM_GATES:
                gm_next += self.ops["u_" + name].backward_input(ga[name][t])
        gx_grad = np.zeros_like(x_seq)
        for name in _LSTM_GATES:
            self._op_grads("w_" + name, x_seq, ga[name], grads)
            self._op_grads("u_" + name, m_prevs, ga[name], grads)
            grads["b_" + name] = ga[name].sum(axis=0)
            gx_grad += self.ops["w_" + name].backward_input(ga[name])
        if self.proj is not None:
            grads["proj"] = self.proj.param_grads(
                np.vstack([h0[None, :], h_seq]), np.vstack([gm_next[None, :], gm_seq])
            )["w"]
            carry_h = self.proj.backward_input(gm_next)
        else:
            carry_h = gm_next
        return gx_grad, grads, (carry_h, gc)


class GruLayer(_LayerBase):
    """GRU layer; ``blend_input`` selects the input-blending variant.

    The input-blending variant has no dense fast path and requires the
    input width to equal the emitted width.
    """

    kind = "gru"

    def __init__(self, ops, bias, proj=None, blend_input=False):
        super().__init__(ops, bias, proj)
        if proj is not None:
            raise ParameterError("GruLayer does not take a shared projection")
        self.blend_input = bool(blend_input)
        if self.blend_input and self.in_dim != self.out_dim:
            raise ShapeError("blend_input requires input width equal to state width")

    @classmethod
    def from_weights(cls, weights, blend_input=False):
        bias = {}
        if weights.has_bias:
            bias = {"b_" + g: getattr(weights, "b_" + g) for g in _GRU_GATES}
        return cls(_as_ops("gru", weights), bias, blend_input=blend_input)

    @property
    def has_bias(self):
        return "b_z" in self.bias

    def init_state(self):
        return np.zeros(self.state_dim)

    def _input_side(self, x_seq):
        out = {}
        for g in _GRU_GATES:
            gx = self.ops["w_" + g].apply(x_seq)
            if self.has_bias:
                gx = gx + self.bias["b_" + g]
            out[g] = gx
        return out

    def forward_window(self, x_seq, state, want_cache=True):
        x_seq = np.asarray(x_seq, dtype=np.float64)
        T = x_seq.shape[0]
        h0 = np.asarray(state, dtype=np.float64)
        if T == 0:
            return np.zeros((0, self.out_dim)), h0, None
        k = self.state_dim
        if self._fast() and not self.blend_input:
            gxp = self._input_side(x_seq)
            gx = np.hstack([gxp["z"], gxp["r"], gxp["h"]])
            u_zr = np.vstack([self.ops["u_z"].w, self.ops["u_r"].w])
            u_h = self.ops["u_h"].w
            counters.add_macs(T * (u_zr.size + u_h.size))
            h_seq, zrg, rh_seq = backend.kernels().gru_window_forward(
                gx, u_zr, u_h, h0
            )
            cache = ("fast", x_seq, h_seq, zrg, rh_seq, h0) if want_cache else None
            return h_seq, h_seq[-1].copy(), cache
        gx = self._input_side(x_seq)
        h_seq = np.empty((T, k))
        zrg = {g: np.empty((T, k)) for g in _GRU_GATES}
        rh_seq = np.empty((T, k))
        h = h0
        for t in range(T):
            z = sigmoid(gx["z"][t] + self.ops["u_z"].apply(h))
            r = sigmoid(gx["r"][t] + self.ops["u_r"].apply(h))
            rh = r * h
            g = np.tanh(gx["h"][t] + self.ops["u_h"].apply(rh))
            base = x_seq[t] if self.blend_input else h
            h = (1.0 - z) * base + z * g
            zrg["z"][t], zrg["r"][t], zrg["h"][t] = z, r, g
            rh_seq[t], h_seq[t] = rh, h
        cache = ("slow", x_seq, h_seq, zrg, rh_seq, h0) if want_cache else None
        return h_seq, h_seq[-1].copy(), cache

    def backward_window(self, cache, grad_out):
        grads = {}
        grad_out = np.asarray(grad_out, dtype=np.float64)
        if cache[0] == "fast":
            _, x_seq, h_seq, zrg, rh_seq, h0 = cache
            u_zr = np.vstack([self.ops["u_z"].w, self.ops["u_r"].w])
            ggx, grad_u_zr, grad_u_h, carry = backend.kernels().gru_window_backward(
                grad_out, h_seq, zrg, rh_seq, u_zr, self.ops["u_h"].w, h0
            )
            k = self.state_dim
            grads["u_z"] = grad_u_zr[:k]
            grads["u_r"] = grad_u_zr[k:]
            grads["u_h"] = grad_u_h
            gx_grad = np.zeros_like(x_seq)
            for j, g in enumerate(_GRU_GATES):
                sl = ggx[:, j * k : (j + 1) * k]
                self._op_grads("w_" + g, x_seq, sl, grads)
                if self.has_bias:
                    grads["b_" + g] = sl.sum(axis=0)
                gx_grad += self.ops["w_" + g].backward_input(sl)
            return gx_grad, grads, carry
        _, x_seq, h_seq, zrg, rh_seq, h0 = cache
        T, k = h_seq.shape
        h_prevs = np.vstack([h0[None, :], h_seq[:-1]])
        ga = {g: np.empty((T, k)) for g in _GRU_GATES}
        gx_extra = np.zeros_like(x_seq)
        carry = np.zeros(k)
        for t in range(T - 1, -1, -1):
            z, r, g = (zrg[name][t] for name in _GRU_GATES)
            h_prev = h_prevs[t]
            ght = grad_out[t] + carry
            ag = ght * z * (1.0 - g * g)
            base = x_seq[t] if self.blend_input else h_prev
            az = ght * (g - base) * z * (1.0 - z)
            grh = self.ops["u_h"].backward_input(ag)
            ghp = grh * r
            if self.blend_input:
                gx_extra[t] = ght * (1.0 - z)
            else:
                ghp = ghp + ght * (1.0 - z)
            ar = grh * h_prev * r * (1.0 - r)
            ga["z"][t], ga["r"][t], ga["h"][t] = az, ar, ag
            carry = (
                ghp
                + self.ops["u_z"].backward_input(az)
                + self.ops["u_r"].backward_input(ar)
            )
        gx_grad = gx_extra
        for name in _GRU_GATES:
            self._op_grads("w_" + name, x_seq, ga[name], grads)
            if self.has_bias:
                grads["b_" + name] = ga[name].sum(axis=0)
            gx_grad = gx_grad + self.ops["w_" + name].backward_input(ga[name])
        self._op_grads("u_z", h_prevs, ga["z"], grads)
        self._op_grads("u_r", h_prevs, ga["r"], grads)
        self._op_grads("u_h", rh_seq, ga["h"], grads)
        return gx_grad, grads, carry


# ---------------------------------------------------------------------------
# output layer and full model


class OutputLayer:
    """Affine map to vocabulary logits; ``w`` may be any linear operator."""

    def __init__(self, w, b):
        self.op = w if hasattr(w, "apply") else DenseLinear(w)
        self.b = np.asarray(b, dtype=np.float64)
        if self.b.shape != (self.op.out_dim,):
            raise ShapeError("output bias length must equal vocabulary size")

    @property
    def w(self):
        if not getattr(self.op, "is_dense", False):
            raise ParameterError("output weights are not stored densely")
        return self.op.w

    @property
    def vocab_size(self):
        return self.op.out_dim

    @property
    def in_dim(self):
        return self.op.in_dim

    def logits(self, h):
        return self.op.apply(h) + self.b

    def param_arrays(self):
        out = {}
        for sub, arr in self.op.param_arrays().items():
            out["w" if sub == "w" else f"w.{sub}"] = arr
        out["b"] = self.b
        return out

    def mac_count_per_step(self):
        return self.op.mac_count()


def softmax_output(layer, h):
    """Probability vector over the vocabulary for hidden state h."""
    return softmax(layer.logits(np.asarray(h, dtype=np.float64)))


@dataclass
class LanguageModel:
    """Embedding lookup, recurrent layer stack, softmax output."""

    embedding: np.ndarray
    layers: list
    output: OutputLayer
    kind: str = "lstm"

    def __post_init__(self):
        self.embedding = numkit.as_matrix(self.embedding, "embedding")
        if self.layers and self.layers[0].in_dim != self.embedding.shape[1]:
            raise ShapeError("embedding width must match the first layer input")
        for a, b in zip(self.layers, self.layers[1:]):
            if b.in_dim != a.out_dim:
                raise ShapeError("adjacent layers disagree on stream width")
        top = self.layers[-1].out_dim if self.layers else self.embedding.shape[1]
        if self.output.in_dim != top:
            raise ShapeError("output layer width must match the top of the stack")
        if self.output.vocab_size != self.embedding.shape[0]:
            raise ShapeError("embedding and output vocabulary sizes differ")

    @property
    def vocab_size(self):
        return self.embedding.shape[0]

    def init_state(self):
        return [layer.init_state() for layer in self.layers]

    def param_arrays(self):
        out = {"emb": self.embedding}
        for idx, layer in enumerate(self.layers):
            for name, arr in layer.param_arrays().items():
                out[f"layers.{idx}.{name}"] = arr
        for name, arr in self.output.param_arrays().items():
            out[f"out.{name}"] = arr
        return out

    def param_count(self):
        return sum(a.size for a in self.param_arrays().values())

    def mac_count_per_step(self):
        """Analytic multiply-accumulates for one inference step."""
        total = sum(layer.mac_count_per_step() for layer in self.layers)
        return total + self.output.mac_count_per_step()


def _check_ids(ids, vocab_size, name):
    ids = np.asarray(ids, dtype=np.intp)
    if ids.ndim != 1:
        raise ShapeError(f"{name} must be a 1-D id sequence")
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise ParameterError(f"{name} contains ids outside [0, {vocab_size})")
    return ids


def forward_sequence(model, ids, state=None, dropout=0.0, rng=None, want_cache=True):
    """Run a token window through the model.

    Returns (probs, state_out, cache): per-step probability rows, the
    detached final recurrent state, and the cache consumed by
    :func:`backward_sequence`.  ``dropout`` applies inverted dropout to
    the embedding output and to every layer's emitted stream; it needs
    an ``rng`` when nonzero.
    """
    ids = _check_ids(ids, model.vocab_size, "ids")
    if not 0.0 <= dropout < 1.0:
        raise ParameterError("dropout must lie in [0, 1)")
    if dropout > 0.0 and rng is None:
        raise ParameterError("dropout requires an rng")
    state = model.init_state() if state is None else state
    T = ids.size
    x = model.embedding[ids] if T else np.zeros((0, model.embedding.shape[1]))
    masks = []
    layer_caches = []
    layer_inputs = []
    state_out = []
    for idx, layer in enumerate(model.layers):
        if dropout > 0.0 and T:
            mask = (rng.random(x.shape) >= dropout) / (1.0 - dropout)
            x = x * mask
        else:
            mask = None
        masks.append(mask)
        layer_inputs.append(x)
        x, st, cache = layer.forward_window(x, state[idx], want_cache=want_cache)
        layer_caches.append(cache)
        state_out.append(st)
    if dropout > 0.0 and T:
        mask = (rng.random(x.shape) >= dropout) / (1.0 - dropout)
        x = x * mask
    else:
        mask = None
    masks.append(mask)
    logits = model.output.logits(x) if T else np.zeros((0, model.vocab_size))
    probs = softmax(logits) if T else logits
    cache = None
    if want_cache:
        cache = {
            "ids": ids,
            "probs": probs,
            "top": x,
            "masks": masks,
            "layer_caches": layer_caches,
            "layer_inputs": layer_inputs,
        }
    return probs, state_out, cache


def backward_sequence(model, cache, targets):
    """Gradients of mean cross-entropy over the window, keyed like
    :meth:`LanguageModel.param_arrays`."""
    targets = _check_ids(targets, model.vocab_size, "targets")
    probs = cache["probs"]
    T = probs.shape[0]
    if targets.size != T:
        raise ShapeError("targets length must match the forward window")
    grads = {name: np.zeros_like(arr) for name, arr in model.param_arrays().items()}
    if T == 0:
        return grads
    glogits = probs.copy()
    glogits[np.arange(T), targets] -= 1.0
    glogits /= T
    for sub, arr in model.output.op.param_grads(cache["top"], glogits).items():
        key = "out.w" if sub == "w" else f"out.w.{sub}"
        grads[key] += arr
    grads["out.b"] += glogits.sum(axis=0)
    gx = model.output.op.backward_input(glogits)
    if cache["masks"][-1] is not None:
        gx = gx * cache["masks"][-1]
    for idx in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[idx]
        gx, layer_grads, _ = layer.backward_window(cache["layer_caches"][idx], gx)
        for name, arr in layer_grads.items():
            grads[f"layers.{idx}.{name}"] += arr
        if cache["masks"][idx] is not None:
            gx = gx * cache["masks"][idx]
    np.add.at(grads["emb"], cache["ids"], gx)
    return grads


def sequence_loss(probs, targets):
    """Mean cross-entropy in nats; perplexity is exp of this."""
    targets = np.asarray(targets, dtype=np.intp)
    if probs.shape[0] != targets.size:
        raise ShapeError("probs and targets disagree on window length")
    if targets.size == 0:
        return 0.0
    picked = probs[np.arange(targets.size), targets]
    return float(-np.mean(np.log(np.maximum(picked, 1e-300))))


_LAYER_KINDS = {"rnn": RnnLayer, "lstm": LstmLayer, "gru": GruLayer}


def _uniform(rng, shape, scale):
    return rng.uniform(-scale, scale, size=shape)


def new_cell_weights(kind, k, k_in, rng, init_scale=0.1, gru_bias=True):
    """Randomly initialized dense weights for one cell."""
    if kind == "rnn":
        return RnnCellWeights(
            _uniform(rng, (k, k_in), init_scale),
            _uniform(rng, (k, k), init_scale),
            np.zeros(k),
        )
    if kind == "lstm":
        parts = {}
        for g in _LSTM_GATES:
            parts["w_" + g] = _uniform(rng, (k, k_in), init_scale)
            parts["u_" + g] = _uniform(rng, (k, k), init_scale)
            parts["b_" + g] = np.zeros(k)
        return LstmCellWeights(**parts)
    if kind == "gru":
        parts = {}
        for g in _GRU_GATES:
            parts["w_" + g] = _uniform(rng, (k, k_in), init_scale)
            parts["u_" + g] = _uniform(rng, (k, k), init_scale)
            if gru_bias:
                parts["b_" + g] = np.zeros(k)
        return GruCellWeights(**parts)
    raise ParameterError(f"unknown cell kind {kind!r}")


def new_model(
    kind,
    vocab_size,
    hidden_size,
    num_layers=2,
    seed=0,
    init_scale=0.1,
    emb_dim=None,
    gru_bias=True,
    gru_blend_input=False,
):
    """Dense model factory; all weights uniform in +-init_scale."""
    if kind not in _LAYER_KINDS:
        raise ParameterError(f"unknown cell kind {kind!r}")
    if num_layers < 1:
        raise ParameterError("num_layers must be at least 1")
    rng = numkit.make_rng(seed)
    emb_dim = hidden_size if emb_dim is None else int(emb_dim)
    embedding = _uniform(rng, (vocab_size, emb_dim), init_scale)
    layers = []
    k_in = emb_dim
    for _ in range(num_layers):
        weights = new_cell_weights(
            kind, hidden_size, k_in, rng, init_scale, gru_bias=gru_bias
        )
        if kind == "gru":
            layers.append(GruLayer.from_weights(weights, blend_input=gru_blend_input))
        else:
            layers.append(_LAYER_KINDS[kind].from_weights(weights))
        k_in = hidden_size
    output = OutputLayer(
        _uniform(rng, (vocab_size, hidden_size), init_scale), np.zeros(vocab_size)
    )
    return LanguageModel(embedding, layers, output, kind=kind)
