"""Low-rank factorization with a shared projection.

A dense weight W (k x k) is replaced by a product of a tall factor and a
single per-layer projection P (r x k).  The projection is tied: every
gate of a layer consumes the same projected stream m = P h, the next
layer's input IS that stream, and the output layer reads the top
layer's stream directly.  Storing one P per layer enforces the tied
constraint by construction; there is no second copy to drift.

Wiring by cell kind:

* RNN and LSTM keep their k-dim hidden state; the layer emits m = P h.
  These are the projected variants of the dense layer classes.
* GRU moves its state into the r-dim space: update and reset gates are
  r x r, the candidate is produced in k dims and projected back to r
  before blending.  Per layer that is 4 r^2 + 3 k r matrix parameters.

Embeddings become |V| x r tables emitting the projected stream
directly, so the first layer's input is already projected.  Biases are
never factorized.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from . import cells, counters, numkit
from .cells import DenseLinear
from .errors import ParameterError, ShapeError


@dataclass
class LowRankPair:
    """a: (k_out, r), b: (r, k_in); a @ b approximates the dense weight."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.a = numkit.as_matrix(self.a, "a")
        self.b = numkit.as_matrix(self.b, "b")
        if self.a.shape[1] != self.b.shape[0]:
            raise ShapeError("factor inner dimensions differ")

    @property
    def r(self):
        return self.a.shape[1]

    def reconstruct(self):
        return self.a @ self.b

    def param_count(self):
        return self.a.size + self.b.size


def factorize_matrix(w, r):
    """Best rank-r factorization via truncated SVD, singular values split
    evenly between the factors (a = U sqrt(S), b = sqrt(S) Vt)."""
    w = numkit.as_matrix(w, "w")
    res = numkit.truncated_svd(w, r)
    root = np.sqrt(res.s)
    return LowRankPair(res.u * root, root[:, None] * res.vt)


class LrGruLayer:
    """GRU acting in the projected space.

    State h is r-dimensional.  Gates z and r are r x r maps; the
    candidate is formed in the full k-dim space and projected back by
    w_p before the blend, so the only k-sized work per step is the
    candidate path.
    """

    kind = "gru"

    def __init__(self, w_z, w_r, w_h, u_z, u_r, u_h, w_p, b_z, b_r, b_h):
        self.w_z = numkit.as_matrix(w_z, "w_z")
        self.w_r = numkit.as_matrix(w_r, "w_r")
        self.w_h = numkit.as_matrix(w_h, "w_h")
        self.u_z = numkit.as_matrix(u_z, "u_z")
        self.u_r = numkit.as_matrix(u_r, "u_r")
        self.u_h = numkit.as_matrix(u_h, "u_h")
        self.w_p = numkit.as_matrix(w_p, "w_p")
        r, r_in = self.w_z.shape
        k = self.w_h.shape[0]
        if self.w_r.shape != (r, r_in) or self.w_h.shape != (k, r_in):
            raise ShapeError("LR-GRU input factor shapes disagree")
        if self.u_z.shape != (r, r) or self.u_r.shape != (r, r):
            raise ShapeError("LR-GRU gate recurrences must be r x r")
        if self.u_h.shape != (k, r) or self.w_p.shape != (r, k):
            raise ShapeError("LR-GRU candidate path shapes disagree")
        self.b_z = np.asarray(b_z, dtype=np.float64)
        self.b_r = np.asarray(b_r, dtype=np.float64)
        self.b_h = np.asarray(b_h, dtype=np.float64)
        if self.b_z.shape != (r,) or self.b_r.shape != (r,) or self.b_h.shape != (k,):
            raise ShapeError("LR-GRU bias shapes disagree")
        self.in_dim = r_in
        self.state_dim = r
        self.out_dim = r
        self.full_dim = k

    def init_state(self):
        return np.zeros(self.state_dim)

    def param_arrays(self):
        names = ("b_h", "b_r", "b_z", "u_h", "u_r", "u_z", "w_h", "w_p", "w_r", "w_z")
        return {n: getattr(self, n) for n in names}

    def mac_count_per_step(self):
        return sum(
            m.size
            for m in (self.w_z, self.w_r, self.w_h, self.u_z, self.u_r, self.u_h,
                      self.w_p)
        )

    def forward_window(self, x_seq, state, want_cache=True):
        x_seq = np.asarray(x_seq, dtype=np.float64)
        T = x_seq.shape[0]
        h0 = np.asarray(state, dtype=np.float64)
        if T == 0:
            return np.zeros((0, self.out_dim)), h0, None
        counters.add_macs(T * (self.w_z.size + self.w_r.size + self.w_h.size))
        gxz = x_seq @ self.w_z.T + self.b_z
        gxr = x_seq @ self.w_r.T + self.b_r
        gxh = x_seq @ self.w_h.T + self.b_h
        counters.add_macs(
            T * (self.u_z.size + self.u_r.size + self.u_h.size + self.w_p.size)
        )
        r, k = self.state_dim, self.full_dim
        h_seq = np.empty((T, r))
        zr = np.empty((T, 2 * r))
        gk_seq = np.empty((T, k))
        g_seq = np.empty((T, r))
        rh_seq = np.empty((T, r))
        h = h0
        for t in range(T):
            z = cells.sigmoid(gxz[t] + self.u_z @ h)
            rg = cells.sigmoid(gxr[t] + self.u_r @ h)
            rh = rg * h
            gk = np.tanh(gxh[t] + self.u_h @ rh)
            g = self.w_p @ gk
            h = (1.0 - z) * h + z * g
            zr[t, :r] = z
            zr[t, r:] = rg
            gk_seq[t], g_seq[t], rh_seq[t], h_seq[t] = gk, g, rh, h
        cache = None
        if want_cache:
            cache = (x_seq, h_seq, zr, gk_seq, g_seq, rh_seq, h0)
        return h_seq, h_seq[-1].copy(), cache

    def backward_window(self, cache, grad_out):
        x_seq, h_seq, zr, gk_seq, g_seq, rh_seq, h0 = cache
        grad_out = np.asarray(grad_out, dtype=np.float64)
        T, r = h_seq.shape
        k = self.full_dim
        h_prevs = np.vstack([h0[None, :], h_seq[:-1]])
        az_seq = np.empty((T, r))
        ar_seq = np.empty((T, r))
        ag_seq = np.empty((T, k))
        gg_seq = np.empty((T, r))
        carry = np.zeros(r)
        for t in range(T - 1, -1, -1):
            z, rg = zr[t, :r], zr[t, r:]
            h_prev = h_prevs[t]
            ght = grad_out[t] + carry
            gg = ght * z
            gg_seq[t] = gg
            ggk = self.w_p.T @ gg
            ag = ggk * (1.0 - gk_seq[t] * gk_seq[t])
            gz = ght * (g_seq[t] - h_prev)
            grh = self.u_h.T @ ag
            az = gz * z * (1.0 - z)
            ar = grh * h_prev * rg * (1.0 - rg)
            az_seq[t], ar_seq[t], ag_seq[t] = az, ar, ag
            carry = (
                ght * (1.0 - z)
                + grh * rg
                + self.u_z.T @ az
                + self.u_r.T @ ar
            )
        grads = {
            "w_z": az_seq.T @ x_seq,
            "w_r": ar_seq.T @ x_seq,
            "w_h": ag_seq.T @ x_seq,
            "u_z": az_seq.T @ h_prevs,
            "u_r": ar_seq.T @ h_prevs,
            "u_h": ag_seq.T @ rh_seq,
            "w_p": gg_seq.T @ gk_seq,
            "b_z": az_seq.sum(axis=0),
            "b_r": ar_seq.sum(axis=0),
            "b_h": ag_seq.sum(axis=0),
        }
        gx = az_seq @ self.w_z + ar_seq @ self.w_r + ag_seq @ self.w_h
        return gx, grads, carry


def _projected(kind, ops, bias, proj):
    if kind == "rnn":
        return cells.RnnLayer(ops, bias, proj=proj)
    return cells.LstmLayer(ops, bias, proj=proj)


def lr_rnn_layer(rng, k, r, r_in=None, r_out=None, init_scale=0.1):
    """Randomly initialized projected RNN layer (state k, stream r)."""
    r_in = r if r_in is None else r_in
    r_out = r if r_out is None else r_out
    u = rng.uniform
    ops = {
        "w": DenseLinear(u(-init_scale, init_scale, (k, r_in))),
        "u": DenseLinear(u(-init_scale, init_scale, (k, r_out))),
    }
    proj = DenseLinear(u(-init_scale, init_scale, (r_out, k)))
    return cells.RnnLayer(ops, {"b": np.zeros(k)}, proj=proj)


def lr_lstm_layer(rng, k, r, r_in=None, r_out=None, init_scale=0.1):
    """Randomly initialized projected LSTM layer (state k, stream r)."""
    r_in = r if r_in is None else r_in
    r_out = r if r_out is None else r_out
    u = rng.uniform
    ops, bias = {}, {}
    for g in ("i", "f", "c", "o"):
        ops["w_" + g] = DenseLinear(u(-init_scale, init_scale, (k, r_in)))
        ops["u_" + g] = DenseLinear(u(-init_scale, init_scale, (k, r_out)))
        bias["b_" + g] = np.zeros(k)
    proj = DenseLinear(u(-init_scale, init_scale, (r_out, k)))
    return cells.LstmLayer(ops, bias, proj=proj)


def lr_gru_layer(rng, k, r, r_in=None, init_scale=0.1):
    """Randomly initialized LR-GRU layer (state r, candidate path k)."""
    r_in = r if r_in is None else r_in
    u = rng.uniform

    def m(shape):
        return u(-init_scale, init_scale, shape)

    return LrGruLayer(
        m((r, r_in)), m((r, r_in)), m((k, r_in)),
        m((r, r)), m((r, r)), m((k, r)),
        m((r, k)),
        np.zeros(r), np.zeros(r), np.zeros(k),
    )


def lr_rnn_step(layer, x_in, h_prev):
    """One projected-RNN step; returns (emitted stream, new state)."""
    out, st, _ = layer.forward_window(
        np.asarray(x_in, dtype=np.float64)[None, :], h_prev, want_cache=False
    )
    return out[0], st[0]


def lr_lstm_step(layer, x_in, h_prev, c_prev):
    """One projected-LSTM step; returns (emitted stream, h, c)."""
    out, st, _ = layer.forward_window(
        np.asarray(x_in, dtype=np.float64)[None, :], (h_prev, c_prev),
        want_cache=False,
    )
    return out[0], st[0], st[1]


def lr_gru_step(layer, x_in, h_prev):
    """One LR-GRU step; returns the new r-dim state."""
    out, _, _ = layer.forward_window(
        np.asarray(x_in, dtype=np.float64)[None, :], h_prev, want_cache=False
    )
    return out[0]


def _stack_svd(mats, r):
    """Shared projection of a stack of recurrent matrices.

    Returns (per-matrix tall factors, projection P, pseudo-inverse of P).
    P and its pseudo-inverse come from one truncated SVD, so P+ is exact
    for the factorization produced (Vt has orthonormal rows).
    """
    stack = np.vstack(mats)
    res = numkit.truncated_svd(stack, r)
    root = np.sqrt(res.s)
    tall = res.u * root
    proj = root[:, None] * res.vt
    # zero directions stay zero under the pseudo-inverse
    inv_root = np.divide(1.0, root, out=np.zeros_like(root), where=root > 0)
    pinv = res.vt.T * inv_root
    k = mats[0].shape[0]
    parts = [tall[j * k : (j + 1) * k] for j in range(len(mats))]
    return parts, proj, pinv


def compress_model_lr(
    model, r_cells, r_io=None, init="random", seed=0, init_scale=0.1
):
    """Replace a dense model's layers by their low-rank variants.

    ``init="random"`` draws fresh factors (training from scratch);
    ``init="svd"`` derives them from the dense weights: the recurrent
    gate stack of each layer is factored through one shared projection,
    input-side factors are composed with the upstream factorization, and
    at full rank the compressed model reproduces the dense model
    exactly.  For GRU the state space itself shrinks, which has no
    dense-derived analogue below full rank, so ``init="svd"`` requires
    r_cells equal to the hidden size there.
    """
    r_cells = int(r_cells)
    r_io = r_cells if r_io is None else int(r_io)
    if init not in ("random", "svd"):
        raise ParameterError(f"unknown init mode {init!r}")
    if not model.layers:
        raise ParameterError("model has no recurrent layers")
    kind = model.kind
    k = model.layers[0].state_dim
    V = model.vocab_size
    if r_cells < 1 or r_cells > k:
        raise ParameterError(f"r_cells must lie in [1, {k}]")
    if r_io < 1 or r_io > min(V, k):
        raise ParameterError(f"r_io must lie in [1, {min(V, k)}]")
    if kind == "gru" and r_io != r_cells:
        raise ParameterError(
            "LR-GRU emits its r_cells state stream; r_io must equal r_cells"
        )
    if 2 * r_cells >= k:
        warnings.warn(
            "rank >= half the hidden size: the factored layer has at least "
            "as many parameters as the dense one",
            stacklevel=2,
        )
    L = len(model.layers)
    widths_in = [r_io] + [r_cells] * (L - 1)
    widths_out = [r_cells] * (L - 1) + [r_io]
    if kind == "gru":
        widths_out = [r_cells] * L

    if init == "random":
        rng = numkit.make_rng(seed)
        layers = []
        for idx in range(L):
            if kind == "rnn":
                layers.append(
                    lr_rnn_layer(rng, k, r_cells, widths_in[idx], widths_out[idx],
                                 init_scale)
                )
            elif kind == "lstm":
                layers.append(
                    lr_lstm_layer(rng, k, r_cells, widths_in[idx], widths_out[idx],
                                  init_scale)
                )
            else:
                layers.append(
                    lr_gru_layer(rng, k, r_cells, widths_in[idx], init_scale)
                )
        embedding = rng.uniform(-init_scale, init_scale, (V, r_io))
        out_w = rng.uniform(-init_scale, init_scale, (V, widths_out[-1]))
        output = cells.OutputLayer(out_w, np.zeros(V))
        return cells.LanguageModel(embedding, layers, output, kind=kind)

    # SVD initialization from the trained dense weights.
    for layer in model.layers:
        if kind != "gru" and getattr(layer, "proj", None) is not None:
            raise ParameterError("model is already projected")
    emb_res = numkit.truncated_svd(model.embedding, r_io)
    root = np.sqrt(emb_res.s)
    embedding = emb_res.u * root
    # maps the r_io-dim embedding stream back toward the original k dims
    up = (root[:, None] * emb_res.vt).T
    layers = []
    if kind == "gru":
        if r_cells != k:
            raise ParameterError(
                "svd init for LR-GRU is only defined at full rank "
                "(the state space changes below it)"
            )
        for idx, layer in enumerate(model.layers):
            if layer.blend_input:
                raise ParameterError(
                    "svd init is not defined for input-blending GRU layers"
                )
            wz, wr, wh = (layer.ops["w_" + g].w for g in ("z", "r", "h"))
            if idx == 0:
                wz, wr, wh = wz @ up, wr @ up, wh @ up
            bias = {
                g: layer.bias.get("b_" + g, np.zeros(k)).copy()
                for g in ("z", "r", "h")
            }
            layers.append(
                LrGruLayer(
                    wz.copy(), wr.copy(), wh.copy(),
                    layer.ops["u_z"].w.copy(), layer.ops["u_r"].w.copy(),
                    layer.ops["u_h"].w.copy(),
                    np.eye(k),
                    bias["z"], bias["r"], bias["h"],
                )
            )
        out_w = model.output.w.copy()
    else:
        gate_names = ("w",) if kind == "rnn" else tuple(
            "w_" + g for g in ("i", "f", "c", "o")
        )
        rec_names = ("u",) if kind == "rnn" else tuple(
            "u_" + g for g in ("i", "f", "c", "o")
        )
        for idx, layer in enumerate(model.layers):
            rec = [layer.ops[n].w for n in rec_names]
            parts, proj, pinv = _stack_svd(rec, widths_out[idx])
            ops = {}
            for n, w in zip(gate_names, (layer.ops[n].w for n in gate_names)):
                ops[n] = DenseLinear(w @ up)
            for n, tall in zip(rec_names, parts):
                ops[n] = DenseLinear(tall)
            bias = {b: arr.copy() for b, arr in layer.bias.items()}
            layers.append(_projected(kind, ops, bias, DenseLinear(proj)))
            up = pinv
        out_w = model.output.w @ up
    output = cells.OutputLayer(out_w, model.output.b.copy())
    return cells.LanguageModel(embedding, layers, output, kind=kind)
