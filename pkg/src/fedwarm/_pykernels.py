"""Numpy reference kernels. Same signatures as the compiled ``_ckernels``.

Parameter layouts::

    linear: W (d, C) row-major, then b (C)
    mlp:    W1 (d, H), b1 (H), W2 (H, C), b2 (C)

Losses are the batch mean of cross-entropy plus ``kl * KL(q || softmax)``
when soft targets ``q`` are given.
"""

from __future__ import annotations

import numpy as np


def _split_linear(w, d, C):
    W = w[: d * C].reshape(d, C)
    b = w[d * C : d * C + C]
    return W, b


def _split_mlp(w, d, H, C):
    o = 0
    W1 = w[o : o + d * H].reshape(d, H)
    o += d * H
    b1 = w[o : o + H]
    o += H
    W2 = w[o : o + H * C].reshape(H, C)
    o += H * C
    b2 = w[o : o + C]
    return W1, b1, W2, b2


def _ce_head(z, y, q, kl):
    """Loss and d(loss)/d(logits) for a batch of logits."""
    n = z.shape[0]
    m = z.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))
    logp = z - lse
    p = np.exp(logp)
    rows = np.arange(n)
    loss = -logp[rows, y].sum()
    dz = p.copy()
    dz[rows, y] -= 1.0
    if q is not None and kl != 0.0:
        pos = q > 0
        loss += kl * float(np.sum(q[pos] * (np.log(q[pos]) - logp[pos])))
        dz += kl * (p - q)
    return float(loss) / n, dz / n


def linear_logits(w, X, C):
    d = X.shape[1]
    W, b = _split_linear(w, d, C)
    return X @ W + b


def linear_loss_grad(w, X, y, C, q=None, kl=0.0):
    d = X.shape[1]
    W, b = _split_linear(w, d, C)
    loss, dz = _ce_head(X @ W + b, y, q, kl)
    g = np.empty_like(w)
    g[: d * C] = (X.T @ dz).reshape(-1)
    g[d * C :] = dz.sum(axis=0)
    return loss, g


def mlp_logits(w, X, H, C):
    d = X.shape[1]
    W1, b1, W2, b2 = _split_mlp(w, d, H, C)
    return np.tanh(X @ W1 + b1) @ W2 + b2


def mlp_loss_grad(w, X, y, H, C, q=None, kl=0.0):
    d = X.shape[1]
    W1, b1, W2, b2 = _split_mlp(w, d, H, C)
    a = np.tanh(X @ W1 + b1)
    loss, dz = _ce_head(a @ W2 + b2, y, q, kl)
    dh = (dz @ W2.T) * (1.0 - a * a)
    g = np.empty_like(w)
    o = 0
    g[o : o + d * H] = (X.T @ dh).reshape(-1)
    o += d * H
    g[o : o + H] = dh.sum(axis=0)
    o += H
    g[o : o + H * C] = (a.T @ dz).reshape(-1)
    o += H * C
    g[o : o + C] = dz.sum(axis=0)
    return loss, g
