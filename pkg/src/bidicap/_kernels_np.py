"""Pure-numpy implementations of the hot kernels.

This is the fallback backend; `bidicap.kernels` re-exports either these
functions or their numba twins from `_kernels_nb`. Both backends must agree
within floating-point tolerance (see tests/test_kernels.py).
"""

import math

import numpy as np


def softmax_rows(x):
    """Row-wise stable softmax. x: (N, M)."""
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    e /= e.sum(axis=1, keepdims=True)
    return e


def softmax_rows_backward(p, g):
    """Gradient of softmax_rows. p are the forward outputs, g the upstream grad."""
    inner = (p * g).sum(axis=1, keepdims=True)
    return p * (g - inner)


def layer_norm_rows(x, gain, bias, eps):
    """Normalize each row to zero mean / unit variance, then scale and shift.

    Returns (out, xhat, inv_std); xhat and inv_std are needed by the backward.
    """
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std[:, None]
    return xhat * gain + bias, xhat, inv_std


def layer_norm_rows_backward(g, xhat, inv_std, gain):
    """Gradients of layer_norm_rows w.r.t. (x, gain, bias)."""
    d = xhat.shape[1]
    gxhat = g * gain
    dot1 = gxhat.sum(axis=1, keepdims=True)
    dot2 = (gxhat * xhat).sum(axis=1, keepdims=True)
    gx = (gxhat - dot1 / d - xhat * (dot2 / d)) * inv_std[:, None]
    ggain = (g * xhat).sum(axis=0)
    gbias = g.sum(axis=0)
    return gx, ggain, gbias


def scatter_add_rows(acc, ids, rows):
    """acc[ids[i]] += rows[i], with repeated ids accumulated."""
    np.add.at(acc, ids, rows)


def attention_step(q, keys, values, n_heads):
    """Single-position multi-head attention over cached keys/values.

    q: (B, H*dk) one query per lane; keys: (B, T, H*dk); values: (B, T, H*dv).
    Returns (B, H*dv).
    """
    B, t, hdk = keys.shape
    dk = hdk // n_heads
    dv = values.shape[2] // n_heads
    scale = 1.0 / math.sqrt(dk)
    qh = q.reshape(B, n_heads, dk)
    kh = keys.reshape(B, t, n_heads, dk)
    vh = values.reshape(B, t, n_heads, dv)
    scores = np.einsum("bhd,bthd->bht", qh, kh) * scale
    m = scores.max(axis=2, keepdims=True)
    w = np.exp(scores - m)
    w /= w.sum(axis=2, keepdims=True)
    out = np.einsum("bht,bthd->bhd", w, vh)
    return np.ascontiguousarray(out.reshape(B, n_heads * dv))


def adam_update(p, g, m, v, lr, beta1, beta2, eps, corr1, corr2):
    """One Adam step over flat views; updates p, m, v in place.

    corr1/corr2 are the bias corrections 1-beta^t for the current step.
    """
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    p -= lr * (m / corr1) / (np.sqrt(v / corr2) + eps)
