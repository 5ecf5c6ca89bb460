"""Pure-numpy implementations of the hot kernels.

The compiled extension (``rnnpack._core``) exports the same functions with
the same signatures; ``rnnpack.backend`` picks one of the two at import
time.  Everything here operates on C-contiguous float64 arrays and mutates
only the arguments documented as in-place.

Kernel contract:

* ``jacobi_sweeps(bt, vt, tol, max_sweeps)`` orthogonalizes the rows of
  ``bt`` (each row is one working column of the matrix being decomposed)
  by plane rotations, accumulating the same rotations into the rows of
  ``vt``.  Returns the number of sweeps executed, or -1 if the tolerance
  was not reached.
* ``*_window_forward`` / ``*_window_backward`` run one unrolled window of
  a recurrent cell.  Input-side pre-activations ``gx`` (weights times the
  layer input, plus biases) are precomputed by the caller in one batched
  matmul; the kernels own only the sequential recurrence.
"""

import numpy as np

NAME = "python"


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _round_robin_rounds(n):
    """Pairings of 0..n-1 into disjoint pairs, every pair met exactly once."""
    m = n if n % 2 == 0 else n + 1
    rounds = []
    for r in range(m - 1):
        pairs = [(m - 1, r)]
        for i in range(1, m // 2):
            pairs.append(((r + i) % (m - 1), (r - i) % (m - 1)))
        rounds.append([(p, q) for p, q in pairs if p < n and q < n])
    return rounds


def jacobi_sweeps(bt, vt, tol, max_sweeps):
    """One-sided Jacobi orthogonalization over rows of bt, in place.

    Rows play the role of the columns of the matrix under decomposition,
    so each plane rotation touches two contiguous rows.  Within a sweep
    the pairs are visited in disjoint batches (a round-robin schedule),
    which lets every batch rotate as one vectorized update; disjoint
    rotations commute, so the result is a valid Jacobi sweep.
    """
    n = bt.shape[0]
    if n < 2:
        return 1
    rounds = _round_robin_rounds(n)
    for sweep in range(max_sweeps):
        rotated = 0
        for pairs in rounds:
            ps = np.fromiter((p for p, _ in pairs), dtype=np.intp)
            qs = np.fromiter((q for _, q in pairs), dtype=np.intp)
            bp = bt[ps]
            bq = bt[qs]
            alpha = np.einsum("ij,ij->i", bp, bp)
            beta = np.einsum("ij,ij->i", bq, bq)
            gamma = np.einsum("ij,ij->i", bp, bq)
            need = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not np.any(need):
                continue
            rotated += int(np.count_nonzero(need))
            ps = ps[need]
            qs = qs[need]
            zeta = (beta[need] - alpha[need]) / (2.0 * gamma[need])
            sign = np.where(zeta >= 0.0, 1.0, -1.0)
            t = sign / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = (c * t)[:, None]
            c = c[:, None]
            bp = bt[ps]
            bq = bt[qs]
            bt[ps] = c * bp - s * bq
            bt[qs] = s * bp + c * bq
            vp = vt[ps]
            vq = vt[qs]
            vt[ps] = c * vp - s * vq
            vt[qs] = s * vp + c * vq
        if rotated == 0:
            return sweep + 1
    return -1


def rnn_window_forward(gx, u, h0):
    """h_t = tanh(gx_t + u h_{t-1}); returns the (T, k) state sequence."""
    T = gx.shape[0]
    h_seq = np.empty_like(gx)
    h = h0
    for t in range(T):
        h = np.tanh(gx[t] + u @ h)
        h_seq[t] = h
    return h_seq


def rnn_window_backward(gh, h_seq, u, h0):
    T, k = gh.shape
    grad_gx = np.empty_like(gh)
    grad_u = np.zeros_like(u)
    carry = np.zeros(k)
    for t in range(T - 1, -1, -1):
        ht = h_seq[t]
        ga = (gh[t] + carry) * (1.0 - ht * ht)
        grad_gx[t] = ga
        h_prev = h_seq[t - 1] if t > 0 else h0
        grad_u += np.outer(ga, h_prev)
        carry = u.T @ ga
    return grad_gx, grad_u, carry


def lstm_window_forward(gx, u, h0, c0):
    """Gate stacking order along the 4k axis is (i, f, g, o).

    Returns (h_seq, c_seq, gates) where gates holds the post-nonlinearity
    gate values needed by the backward pass.
    """
    T = gx.shape[0]
    k = h0.shape[0]
    h_seq = np.empty((T, k))
    c_seq = np.empty((T, k))
    gates = np.empty((T, 4 * k))
    h = h0
    c = c0
    for t in range(T):
        a = gx[t] + u @ h
        i = _sigmoid(a[:k])
        f = _sigmoid(a[k : 2 * k])
        g = np.tanh(a[2 * k : 3 * k])
        o = _sigmoid(a[3 * k :])
        c = f * c + i * g
        h = o * np.tanh(c)
        gates[t, :k] = i
        gates[t, k : 2 * k] = f
        gates[t, 2 * k : 3 * k] = g
        gates[t, 3 * k :] = o
        c_seq[t] = c
        h_seq[t] = h
    return h_seq, c_seq, gates


def lstm_window_backward(gh, gates, h_seq, c_seq, u, h0, c0):
    T, k = gh.shape
    grad_gx = np.empty((T, 4 * k))
    grad_u = np.zeros_like(u)
    carry_h = np.zeros(k)
    gc = np.zeros(k)
    for t in range(T - 1, -1, -1):
        i = gates[t, :k]
        f = gates[t, k : 2 * k]
        g = gates[t, 2 * k : 3 * k]
        o = gates[t, 3 * k :]
        tc = np.tanh(c_seq[t])
        ght = gh[t] + carry_h
        gc = gc + ght * o * (1.0 - tc * tc)
        c_prev = c_seq[t - 1] if t > 0 else c0
        ga = grad_gx[t]
        ga[:k] = gc * g * i * (1.0 - i)
        ga[k : 2 * k] = gc * c_prev * f * (1.0 - f)
        ga[2 * k : 3 * k] = gc * i * (1.0 - g * g)
        ga[3 * k :] = ght * tc * o * (1.0 - o)
        gc = gc * f
        h_prev = h_seq[t - 1] if t > 0 else h0
        grad_u += np.outer(ga, h_prev)
        carry_h = u.T @ ga
    return grad_gx, grad_u, carry_h, gc


def gru_window_forward(gx, u_zr, u_h, h0):
    """Gate stacking order along the 3k axis is (z, r, candidate).

    Returns (h_seq, zrg, rh_seq): state sequence, post-nonlinearity gate
    and candidate values, and the r * h_prev products the candidate saw.
    """
    T = gx.shape[0]
    k = h0.shape[0]
    h_seq = np.empty((T, k))
    zrg = np.empty((T, 3 * k))
    rh_seq = np.empty((T, k))
    h = h0
    for t in range(T):
        azr = gx[t, : 2 * k] + u_zr @ h
        z = _sigmoid(azr[:k])
        r = _sigmoid(azr[k:])
        rh = r * h
        g = np.tanh(gx[t, 2 * k :] + u_h @ rh)
        h = (1.0 - z) * h + z * g
        zrg[t, :k] = z
        zrg[t, k : 2 * k] = r
        zrg[t, 2 * k :] = g
        rh_seq[t] = rh
        h_seq[t] = h
    return h_seq, zrg, rh_seq


def gru_window_backward(gh, h_seq, zrg, rh_seq, u_zr, u_h, h0):
    T, k = gh.shape
    grad_gx = np.empty((T, 3 * k))
    grad_u_zr = np.zeros_like(u_zr)
    grad_u_h = np.zeros_like(u_h)
    carry = np.zeros(k)
    for t in range(T - 1, -1, -1):
        z = zrg[t, :k]
        r = zrg[t, k : 2 * k]
        g = zrg[t, 2 * k :]
        h_prev = h_seq[t - 1] if t > 0 else h0
        ght = gh[t] + carry
        ag = ght * z * (1.0 - g * g)
        gz = ght * (g - h_prev)
        ghp = ght * (1.0 - z)
        grh = u_h.T @ ag
        ghp += grh * r
        az = gz * z * (1.0 - z)
        ar = grh * h_prev * r * (1.0 - r)
        grad_gx[t, :k] = az
        grad_gx[t, k : 2 * k] = ar
        grad_gx[t, 2 * k :] = ag
        azr = grad_gx[t, : 2 * k]
        grad_u_zr += np.outer(azr, h_prev)
        grad_u_h += np.outer(ag, rh_seq[t])
        carry = ghp + u_zr.T @ azr
    return grad_gx, grad_u_zr, grad_u_h, carry
