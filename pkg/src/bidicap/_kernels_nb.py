"""Numba-jitted implementations of the hot kernels.

Same contracts as `_kernels_np`; compiled lazily per dtype (float32 for
training runs, float64 for gradient checks). Reductions accumulate in
float64 for stability.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def softmax_rows(x):
    n, m = x.shape
    out = np.empty_like(x)
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, m):
            if x[i, j] > mx:
                mx = x[i, j]
        z = 0.0
        for j in range(m):
            e = math.exp(x[i, j] - mx)
            out[i, j] = e
            z += e
        for j in range(m):
            out[i, j] /= z
    return out


@njit(cache=True)
def softmax_rows_backward(p, g):
    n, m = p.shape
    out = np.empty_like(p)
    for i in range(n):
        inner = 0.0
        for j in range(m):
            inner += p[i, j] * g[i, j]
        for j in range(m):
            out[i, j] = p[i, j] * (g[i, j] - inner)
    return out


@njit(cache=True)
def layer_norm_rows(x, gain, bias, eps):
    n, d = x.shape
    out = np.empty_like(x)
    xhat = np.empty_like(x)
    inv_std = np.empty(n, dtype=x.dtype)
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            c = x[i, j] - mu
            var += c * c
        var /= d
        istd = 1.0 / math.sqrt(var + eps)
        inv_std[i] = istd
        for j in range(d):
            h = (x[i, j] - mu) * istd
            xhat[i, j] = h
            out[i, j] = h * gain[j] + bias[j]
    return out, xhat, inv_std


@njit(cache=True)
def layer_norm_rows_backward(g, xhat, inv_std, gain):
    n, d = xhat.shape
    gx = np.empty_like(xhat)
    ggain = np.zeros(d, dtype=xhat.dtype)
    gbias = np.zeros(d, dtype=xhat.dtype)
    for i in range(n):
        dot1 = 0.0
        dot2 = 0.0
        for j in range(d):
            gh = g[i, j] * gain[j]
            dot1 += gh
            dot2 += gh * xhat[i, j]
        dot1 /= d
        dot2 /= d
        istd = inv_std[i]
        for j in range(d):
            gh = g[i, j] * gain[j]
            gx[i, j] = (gh - dot1 - xhat[i, j] * dot2) * istd
            ggain[j] += g[i, j] * xhat[i, j]
            gbias[j] += g[i, j]
    return gx, ggain, gbias


@njit(cache=True)
def scatter_add_rows(acc, ids, rows):
    n, d = rows.shape
    for i in range(n):
        r = ids[i]
        for j in range(d):
            acc[r, j] += rows[i, j]


@njit(cache=True)
def attention_step(q, keys, values, n_heads):
    B, t, hdk = keys.shape
    dk = hdk // n_heads
    hdv = values.shape[2]
    dv = hdv // n_heads
    scale = 1.0 / math.sqrt(dk)
    out = np.empty((B, hdv), dtype=q.dtype)
    s = np.empty(t, dtype=np.float64)
    for b in range(B):
        for h in range(n_heads):
            qo = h * dk
            vo = h * dv
            mx = -1.0e300
            for j in range(t):
                acc = 0.0
                for d in range(dk):
                    acc += q[b, qo + d] * keys[b, j, qo + d]
                acc *= scale
                s[j] = acc
                if acc > mx:
                    mx = acc
            z = 0.0
            for j in range(t):
                e = math.exp(s[j] - mx)
                s[j] = e
                z += e
            for d in range(dv):
                acc = 0.0
                for j in range(t):
                    acc += s[j] * values[b, j, vo + d]
                out[b, vo + d] = acc / z
    return out


@njit(cache=True)
def adam_update(p, g, m, v, lr, beta1, beta2, eps, corr1, corr2):
    n = p.shape[0]
    for i in range(n):
        mi = beta1 * m[i] + (1.0 - beta1) * g[i]
        vi = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi / corr1) / (math.sqrt(vi / corr2) + eps)
