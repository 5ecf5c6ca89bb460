# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: Jacobi sweeps and recurrent window loops.

Mirrors the signatures and semantics of ``rnnpack._pykernels``; see that
module for the contract.  The sequential loops here remove the per-step
interpreter dispatch that dominates the numpy path at small hidden sizes.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, fabs, sqrt, tanh

cnp.import_array()

NAME = "compiled"


cdef inline double _sigmoid(double x) nogil:
    cdef double e
    if x >= 0.0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


def jacobi_sweeps(double[:, ::1] bt, double[:, ::1] vt, double tol, int max_sweeps):
    """Row-cyclic one-sided Jacobi; rotates rows of bt and vt in place."""
    cdef Py_ssize_t n = bt.shape[0]
    cdef Py_ssize_t m = bt.shape[1]
    cdef Py_ssize_t nv = vt.shape[1]
    cdef Py_ssize_t p, q, j
    cdef int sweep, rotated
    cdef double alpha, beta, gamma, zeta, t, c, s, bp, bq

    if n < 2:
        return 1
    for sweep in range(max_sweeps):
        rotated = 0
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for j in range(m):
                    bp = bt[p, j]
                    bq = bt[q, j]
                    alpha += bp * bp
                    beta += bq * bq
                    gamma += bp * bq
                if fabs(gamma) <= tol * sqrt(alpha * beta):
                    continue
                rotated += 1
                zeta = (beta - alpha) / (2.0 * gamma)
                t = (1.0 if zeta >= 0.0 else -1.0) / (fabs(zeta) + sqrt(1.0 + zeta * zeta))
                c = 1.0 / sqrt(1.0 + t * t)
                s = c * t
                for j in range(m):
                    bp = bt[p, j]
                    bq = bt[q, j]
                    bt[p, j] = c * bp - s * bq
                    bt[q, j] = s * bp + c * bq
                for j in range(nv):
                    bp = vt[p, j]
                    bq = vt[q, j]
                    vt[p, j] = c * bp - s * bq
                    vt[q, j] = s * bp + c * bq
        if rotated == 0:
            return sweep + 1
    return -1


def rnn_window_forward(double[:, ::1] gx, double[:, ::1] u, double[::1] h0):
    cdef Py_ssize_t T = gx.shape[0]
    cdef Py_ssize_t k = gx.shape[1]
    cdef cnp.ndarray[double, ndim=2] h_seq = np.empty((T, k))
    cdef double[:, ::1] h = h_seq
    cdef double[::1] hprev
    cdef Py_ssize_t t, i, j
    cdef double acc

    hprev = h0
    for t in range(T):
        for i in range(k):
            acc = gx[t, i]
            for j in range(k):
                acc += u[i, j] * hprev[j]
            h[t, i] = tanh(acc)
        hprev = h[t]
    return h_seq


def rnn_window_backward(double[:, ::1] gh, double[:, ::1] h_seq, double[:, ::1] u,
                        double[::1] h0):
    cdef Py_ssize_t T = gh.shape[0]
    cdef Py_ssize_t k = gh.shape[1]
    cdef cnp.ndarray[double, ndim=2] grad_gx = np.empty((T, k))
    cdef cnp.ndarray[double, ndim=2] grad_u = np.zeros((k, k))
    cdef cnp.ndarray[double, ndim=1] carry = np.zeros(k)
    cdef double[:, ::1] ggx = grad_gx
    cdef double[:, ::1] gu = grad_u
    cdef double[::1] car = carry
    cdef cnp.ndarray[double, ndim=1] nxt = np.empty(k)
    cdef double[::1] new_carry = nxt
    cdef double[::1] hprev
    cdef Py_ssize_t t, i, j
    cdef double ht, ga

    for t in range(T - 1, -1, -1):
        hprev = h_seq[t - 1] if t > 0 else h0
        for j in range(k):
            new_carry[j] = 0.0
        for i in range(k):
            ht = h_seq[t, i]
            ga = (gh[t, i] + car[i]) * (1.0 - ht * ht)
            ggx[t, i] = ga
            for j in range(k):
                gu[i, j] += ga * hprev[j]
                new_carry[j] += u[i, j] * ga
        for j in range(k):
            car[j] = new_carry[j]
    return grad_gx, grad_u, carry


def lstm_window_forward(double[:, ::1] gx, double[:, ::1] u, double[::1] h0,
                        double[::1] c0):
    cdef Py_ssize_t T = gx.shape[0]
    cdef Py_ssize_t k = h0.shape[0]
    cdef Py_ssize_t k4 = 4 * k
    cdef cnp.ndarray[double, ndim=2] h_seq = np.empty((T, k))
    cdef cnp.ndarray[double, ndim=2] c_seq = np.empty((T, k))
    cdef cnp.ndarray[double, ndim=2] gates = np.empty((T, k4))
    cdef cnp.ndarray[double, ndim=1] scratch = np.empty(k4)
    cdef double[:, ::1] h = h_seq
    cdef double[:, ::1] c = c_seq
    cdef double[:, ::1] g = gates
    cdef double[::1] a = scratch
    cdef double[::1] hprev, cprev
    cdef Py_ssize_t t, i, j
    cdef double acc, ii, ff, gg, oo, cc

    hprev = h0
    cprev = c0
    for t in range(T):
        for i in range(k4):
            acc = gx[t, i]
            for j in range(k):
                acc += u[i, j] * hprev[j]
            a[i] = acc
        for i in range(k):
            ii = _sigmoid(a[i])
            ff = _sigmoid(a[k + i])
            gg = tanh(a[2 * k + i])
            oo = _sigmoid(a[3 * k + i])
            cc = ff * cprev[i] + ii * gg
            c[t, i] = cc
            h[t, i] = oo * tanh(cc)
            g[t, i] = ii
            g[t, k + i] = ff
            g[t, 2 * k + i] = gg
            g[t, 3 * k + i] = oo
        hprev = h[t]
        cprev = c[t]
    return h_seq, c_seq, gates


def lstm_window_backward(double[:, ::1] gh, double[:, ::1] gates,
                         double[:, ::1] h_seq, double[:, ::1] c_seq,
                         double[:, ::1] u, double[::1] h0, double[::1] c0):
    cdef Py_ssize_t T = gh.shape[0]
    cdef Py_ssize_t k = gh.shape[1]
    cdef Py_ssize_t k4 = 4 * k
    cdef cnp.ndarray[double, ndim=2] grad_gx = np.empty((T, k4))
    cdef cnp.ndarray[double, ndim=2] grad_u = np.zeros((k4, k))
    cdef cnp.ndarray[double, ndim=1] carry_h = np.zeros(k)
    cdef cnp.ndarray[double, ndim=1] gc_arr = np.zeros(k)
    cdef cnp.ndarray[double, ndim=1] nxt = np.empty(k)
    cdef double[:, ::1] ggx = grad_gx
    cdef double[:, ::1] gu = grad_u
    cdef double[::1] car = carry_h
    cdef double[::1] gc = gc_arr
    cdef double[::1] new_carry = nxt
    cdef double[::1] hprev, cprev
    cdef Py_ssize_t t, i, j
    cdef double ii, ff, gg, oo, tc, ght, gci, ga
    cdef double gi, gf, gcand, go

    for t in range(T - 1, -1, -1):
        hprev = h_seq[t - 1] if t > 0 else h0
        cprev = c_seq[t - 1] if t > 0 else c0
        for i in range(k):
            ii = gates[t, i]
            ff = gates[t, k + i]
            gg = gates[t, 2 * k + i]
            oo = gates[t, 3 * k + i]
            tc = tanh(c_seq[t, i])
            ght = gh[t, i] + car[i]
            gci = gc[i] + ght * oo * (1.0 - tc * tc)
            gi = gci * gg * ii * (1.0 - ii)
            gf = gci * cprev[i] * ff * (1.0 - ff)
            gcand = gci * ii * (1.0 - gg * gg)
            go = ght * tc * oo * (1.0 - oo)
            ggx[t, i] = gi
            ggx[t, k + i] = gf
            ggx[t, 2 * k + i] = gcand
            ggx[t, 3 * k + i] = go
            gc[i] = gci * ff
        for j in range(k):
            new_carry[j] = 0.0
        for i in range(k4):
            ga = ggx[t, i]
            for j in range(k):
                gu[i, j] += ga * hprev[j]
                new_carry[j] += u[i, j] * ga
        for j in range(k):
            car[j] = new_carry[j]
    return grad_gx, grad_u, carry_h, gc_arr


def gru_window_forward(double[:, ::1] gx, double[:, ::1] u_zr, double[:, ::1] u_h,
                       double[::1] h0):
    cdef Py_ssize_t T = gx.shape[0]
    cdef Py_ssize_t k = h0.shape[0]
    cdef Py_ssize_t k2 = 2 * k
    cdef cnp.ndarray[double, ndim=2] h_seq = np.empty((T, k))
    cdef cnp.ndarray[double, ndim=2] zrg = np.empty((T, 3 * k))
    cdef cnp.ndarray[double, ndim=2] rh_seq = np.empty((T, k))
    cdef cnp.ndarray[double, ndim=1] scratch = np.empty(k2)
    cdef double[:, ::1] h = h_seq
    cdef double[:, ::1] zg = zrg
    cdef double[:, ::1] rh = rh_seq
    cdef double[::1] a = scratch
    cdef double[::1] hprev
    cdef Py_ssize_t t, i, j
    cdef double acc, zz, rr, gg

    hprev = h0
    for t in range(T):
        for i in range(k2):
            acc = gx[t, i]
            for j in range(k):
                acc += u_zr[i, j] * hprev[j]
            a[i] = acc
        for i in range(k):
            zz = _sigmoid(a[i])
            rr = _sigmoid(a[k + i])
            zg[t, i] = zz
            zg[t, k + i] = rr
            rh[t, i] = rr * hprev[i]
        for i in range(k):
            acc = gx[t, k2 + i]
            for j in range(k):
                acc += u_h[i, j] * rh[t, j]
            gg = tanh(acc)
            zg[t, k2 + i] = gg
            h[t, i] = (1.0 - zg[t, i]) * hprev[i] + zg[t, i] * gg
        hprev = h[t]
    return h_seq, zrg, rh_seq


def gru_window_backward(double[:, ::1] gh, double[:, ::1] h_seq, double[:, ::1] zrg,
                        double[:, ::1] rh_seq, double[:, ::1] u_zr,
                        double[:, ::1] u_h, double[::1] h0):
    cdef Py_ssize_t T = gh.shape[0]
    cdef Py_ssize_t k = gh.shape[1]
    cdef Py_ssize_t k2 = 2 * k
    cdef cnp.ndarray[double, ndim=2] grad_gx = np.empty((T, 3 * k))
    cdef cnp.ndarray[double, ndim=2] grad_u_zr = np.zeros((k2, k))
    cdef cnp.ndarray[double, ndim=2] grad_u_h = np.zeros((k, k))
    cdef cnp.ndarray[double, ndim=1] carry = np.zeros(k)
    cdef cnp.ndarray[double, ndim=1] nxt = np.empty(k)
    cdef cnp.ndarray[double, ndim=1] grh_arr = np.empty(k)
    cdef double[:, ::1] ggx = grad_gx
    cdef double[:, ::1] guzr = grad_u_zr
    cdef double[:, ::1] guh = grad_u_h
    cdef double[::1] car = carry
    cdef double[::1] new_carry = nxt
    cdef double[::1] grh = grh_arr
    cdef double[::1] hprev
    cdef Py_ssize_t t, i, j
    cdef double zz, rr, gg, ght, ag, ga

    for t in range(T - 1, -1, -1):
        hprev = h_seq[t - 1] if t > 0 else h0
        for j in range(k):
            new_carry[j] = 0.0
            grh[j] = 0.0
        for i in range(k):
            zz = zrg[t, i]
            gg = zrg[t, k2 + i]
            ght = gh[t, i] + car[i]
            ag = ght * zz * (1.0 - gg * gg)
            ggx[t, k2 + i] = ag
            new_carry[i] += ght * (1.0 - zz)
            for j in range(k):
                guh[i, j] += ag * rh_seq[t, j]
                grh[j] += u_h[i, j] * ag
        for i in range(k):
            zz = zrg[t, i]
            rr = zrg[t, k + i]
            gg = zrg[t, k2 + i]
            ght = gh[t, i] + car[i]
            new_carry[i] += grh[i] * rr
            ggx[t, i] = ght * (gg - hprev[i]) * zz * (1.0 - zz)
            ggx[t, k + i] = grh[i] * hprev[i] * rr * (1.0 - rr)
        for i in range(k2):
            ga = ggx[t, i]
            for j in range(k):
                guzr[i, j] += ga * hprev[j]
                new_carry[j] += u_zr[i, j] * ga
        for j in range(k):
            car[j] = new_carry[j]
    return grad_gx, grad_u_zr, grad_u_h, carry
