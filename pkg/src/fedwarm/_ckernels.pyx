# cython: language_level=3
"""Compiled loss/gradient kernels.

Samples are accumulated one at a time in ascending row order, so a result
depends only on the batch contents and their order, never on threading.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, tanh

cnp.import_array()


cdef double _head(double[::1] z, long label, double[:, ::1] q, Py_ssize_t row,
                  double kl, bint use_q, double[::1] dz) noexcept nogil:
    """Loss of one sample; writes d(loss)/d(logits) into dz."""
    cdef Py_ssize_t C = z.shape[0]
    cdef Py_ssize_t c
    cdef double m = z[0]
    cdef double s = 0.0
    cdef double lse, logp, p, loss, qc
    for c in range(1, C):
        if z[c] > m:
            m = z[c]
    for c in range(C):
        s += exp(z[c] - m)
    lse = m + log(s)
    loss = lse - z[label]
    for c in range(C):
        p = exp(z[c] - lse)
        dz[c] = p
        if use_q:
            qc = q[row, c]
            dz[c] += kl * (p - qc)
            if qc > 0.0:
                logp = z[c] - lse
                loss += kl * qc * (log(qc) - logp)
    dz[label] -= 1.0
    return loss


def linear_logits(double[::1] w, double[:, ::1] X, Py_ssize_t C):
    cdef Py_ssize_t n = X.shape[0], d = X.shape[1]
    cdef Py_ssize_t i, j, c
    out = np.empty((n, C), dtype=np.float64)
    cdef double[:, ::1] Z = out
    cdef double acc
    with nogil:
        for i in range(n):
            for c in range(C):
                acc = w[d * C + c]
                for j in range(d):
                    acc += X[i, j] * w[j * C + c]
                Z[i, c] = acc
    return out


def linear_loss_grad(double[::1] w, double[:, ::1] X, long[::1] y, Py_ssize_t C,
                     q=None, double kl=0.0):
    cdef Py_ssize_t n = X.shape[0], d = X.shape[1]
    cdef Py_ssize_t i, j, c
    cdef bint use_q = q is not None and kl != 0.0
    cdef double[:, ::1] qv
    if use_q:
        qv = np.ascontiguousarray(q, dtype=np.float64)
    else:
        qv = np.zeros((1, 1), dtype=np.float64)
    grad = np.zeros(w.shape[0], dtype=np.float64)
    cdef double[::1] g = grad
    cdef double[::1] z = np.empty(C, dtype=np.float64)
    cdef double[::1] dz = np.empty(C, dtype=np.float64)
    cdef double total = 0.0
    cdef double acc, inv_n = 1.0 / n
    with nogil:
        for i in range(n):
            for c in range(C):
                acc = w[d * C + c]
                for j in range(d):
                    acc += X[i, j] * w[j * C + c]
                z[c] = acc
            total += _head(z, y[i], qv, i, kl, use_q, dz)
            for j in range(d):
                for c in range(C):
                    g[j * C + c] += X[i, j] * dz[c]
            for c in range(C):
                g[d * C + c] += dz[c]
        for j in range(w.shape[0]):
            g[j] *= inv_n
    return total * inv_n, grad


def mlp_logits(double[::1] w, double[:, ::1] X, Py_ssize_t H, Py_ssize_t C):
    cdef Py_ssize_t n = X.shape[0], d = X.shape[1]
    cdef Py_ssize_t i, j, h, c
    cdef Py_ssize_t ob1 = d * H, oW2 = d * H + H, ob2 = d * H + H + H * C
    out = np.empty((n, C), dtype=np.float64)
    cdef double[:, ::1] Z = out
    cdef double[::1] a = np.empty(H, dtype=np.float64)
    cdef double acc
    with nogil:
        for i in range(n):
            for h in range(H):
                acc = w[ob1 + h]
                for j in range(d):
                    acc += X[i, j] * w[j * H + h]
                a[h] = tanh(acc)
            for c in range(C):
                acc = w[ob2 + c]
                for h in range(H):
                    acc += a[h] * w[oW2 + h * C + c]
                Z[i, c] = acc
    return out


def mlp_loss_grad(double[::1] w, double[:, ::1] X, long[::1] y, Py_ssize_t H,
                  Py_ssize_t C, q=None, double kl=0.0):
    cdef Py_ssize_t n = X.shape[0], d = X.shape[1]
    cdef Py_ssize_t i, j, h, c
    cdef Py_ssize_t ob1 = d * H, oW2 = d * H + H, ob2 = d * H + H + H * C
    cdef bint use_q = q is not None and kl != 0.0
    cdef double[:, ::1] qv
    if use_q:
        qv = np.ascontiguousarray(q, dtype=np.float64)
    else:
        qv = np.zeros((1, 1), dtype=np.float64)
    grad = np.zeros(w.shape[0], dtype=np.float64)
    cdef double[::1] g = grad
    cdef double[::1] a = np.empty(H, dtype=np.float64)
    cdef double[::1] dh = np.empty(H, dtype=np.float64)
    cdef double[::1] z = np.empty(C, dtype=np.float64)
    cdef double[::1] dz = np.empty(C, dtype=np.float64)
    cdef double total = 0.0
    cdef double acc, inv_n = 1.0 / n
    with nogil:
        for i in range(n):
            for h in range(H):
                acc = w[ob1 + h]
                for j in range(d):
                    acc += X[i, j] * w[j * H + h]
                a[h] = tanh(acc)
            for c in range(C):
                acc = w[ob2 + c]
                for h in range(H):
                    acc += a[h] * w[oW2 + h * C + c]
                z[c] = acc
            total += _head(z, y[i], qv, i, kl, use_q, dz)
            for h in range(H):
                acc = 0.0
                for c in range(C):
                    g[oW2 + h * C + c] += a[h] * dz[c]
                    acc += dz[c] * w[oW2 + h * C + c]
                dh[h] = acc * (1.0 - a[h] * a[h])
            for c in range(C):
                g[ob2 + c] += dz[c]
            for j in range(d):
                for h in range(H):
                    g[j * H + h] += X[i, j] * dh[h]
            for h in range(H):
                g[ob1 + h] += dh[h]
        for j in range(w.shape[0]):
            g[j] *= inv_n
    return total * inv_n, grad
