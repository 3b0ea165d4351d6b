"""Scaled dot-product attention, multi-head attention, and the two-flow
bidirectional interactive variant used by the decoder.

All functions are pure over immutable tensors and safe to call concurrently
with distinct inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import MaskError, ShapeError
from .numerics import Tensor

# Additive mask sentinel. A true -inf turns into NaN through softmax on fully
# blocked rows; a large negative constant underflows to an exact zero weight.
NEG_INF = -1.0e9


@dataclass(frozen=True)
class AttentionMask:
    """Additive attention mask: 0 where attending is allowed, NEG_INF where blocked."""

    kind: str  # "none" or "causal"
    matrix: np.ndarray  # (query_len, key_len)

    @staticmethod
    def causal(n: int, dtype=np.float32) -> "AttentionMask":
        """Lower-triangular mask: position t may attend only to positions <= t."""
        m = np.where(np.arange(n)[None, :] > np.arange(n)[:, None], NEG_INF, 0.0)
        return AttentionMask("causal", m.astype(dtype))

    @staticmethod
    def none(query_len: int, key_len: int, dtype=np.float32) -> "AttentionMask":
        return AttentionMask("none", np.zeros((query_len, key_len), dtype=dtype))


@dataclass
class HeadProjection:
    """Per-head query/key/value projections plus the output projection.

    The h per-head matrices are stored concatenated: wq/wk are
    (d_model, h*d_k), wv is (d_model, h*d_v) and wo is (h*d_v, d_model).
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    n_heads: int


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """(..., L, h*dd) -> (..., h, L, dd)."""
    *lead, length, hd = x.shape
    dd = hd // n_heads
    return nx.swapaxes(nx.reshape(x, (*lead, length, n_heads, dd)), -3, -2)


def merge_heads(x: Tensor) -> Tensor:
    """(..., h, L, dd) -> (..., L, h*dd)."""
    *lead, h, length, dd = x.shape
    return nx.reshape(nx.swapaxes(x, -3, -2), (*lead, length, h * dd))


def scaled_dot_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: AttentionMask | None = None,
    p_dropout: float = 0.0,
    training: bool = False,
    rng=None,
) -> Tensor:
    """softmax(Q K^T / sqrt(d_k) + mask) V.

    q: (..., n, d_k), k: (..., m, d_k), v: (..., m, d_v); leading dimensions
    broadcast. A mask row blocking every key is a contract violation.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(
            f"query/key depth mismatch: Q has shape {q.shape}, K has shape {k.shape}"
        )
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(
            f"key/value length mismatch: K has shape {k.shape}, V has shape {v.shape}"
        )
    if mask is not None:
        if mask.matrix.shape != (q.shape[-2], k.shape[-2]):
            raise ShapeError(
                f"mask shape {mask.matrix.shape} does not match "
                f"({q.shape[-2]}, {k.shape[-2]})"
            )
        if (mask.matrix <= NEG_INF / 2).all(axis=-1).any():
            raise MaskError("attention mask blocks every key for some query row")
    scores = nx.scale(nx.matmul(q, nx.swapaxes(k, -1, -2)), 1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        scores = nx.add(scores, Tensor(mask.matrix.astype(q.dtype)))
    probs = nx.softmax(scores, axis=-1)
    probs = nx.dropout(probs, p_dropout, training, rng)
    return nx.matmul(probs, v)


def multi_head(
    q_in: Tensor,
    k_in: Tensor,
    v_in: Tensor,
    mask: AttentionMask | None,
    proj: HeadProjection,
    p_dropout: float = 0.0,
    training: bool = False,
    rng=None,
) -> Tensor:
    """Project h times, attend per head, concatenate and output-project."""
    q = split_heads(nx.matmul(q_in, proj.wq), proj.n_heads)
    k = split_heads(nx.matmul(k_in, proj.wk), proj.n_heads)
    v = split_heads(nx.matmul(v_in, proj.wv), proj.n_heads)
    h = scaled_dot_attention(q, k, v, mask, p_dropout, training, rng)
    return nx.matmul(merge_heads(h), proj.wo)


_ACTIVATIONS = {"relu": nx.relu, "tanh": nx.tanh}


def bidir_interactive_attention(
    x_fwd: Tensor,
    x_bwd: Tensor,
    proj: HeadProjection,
    lam: float,
    af: str,
    mask: AttentionMask,
    p_dropout: float = 0.0,
    training: bool = False,
    rng_fwd=None,
    rng_bwd=None,
) -> tuple[Tensor, Tensor]:
    """Masked multi-head attention over two flows sharing one projection.

    Per head, each flow attends its own past and, weighted by `lam` and passed
    through the activation `af`, the other flow's past:

        H_own   = Attn(Q_own, K_own, V_own)
        H_cross = Attn(Q_own, K_other, V_other)
        H       = H_own + lam * AF(H_cross)

    The causal mask applies to both terms, so position t sees only positions
    <= t of either flow. With lam == 0 the cross term is skipped entirely and
    each flow reduces bit-exactly to standard masked multi-head attention.
    """
    if x_fwd.shape != x_bwd.shape:
        raise ShapeError(
            f"flow shapes differ: forward {x_fwd.shape} vs backward {x_bwd.shape}"
        )
    if lam < 0:
        raise ShapeError(f"cross-flow weight must be >= 0, got {lam}")
    try:
        act = _ACTIVATIONS[af]
    except KeyError:
        raise ShapeError(f"unknown activation {af!r}; expected one of {sorted(_ACTIVATIONS)}")

    h = proj.n_heads
    qf = split_heads(nx.matmul(x_fwd, proj.wq), h)
    kf = split_heads(nx.matmul(x_fwd, proj.wk), h)
    vf = split_heads(nx.matmul(x_fwd, proj.wv), h)
    qb = split_heads(nx.matmul(x_bwd, proj.wq), h)
    kb = split_heads(nx.matmul(x_bwd, proj.wk), h)
    vb = split_heads(nx.matmul(x_bwd, proj.wv), h)

    def one_flow(q, k_own, v_own, k_other, v_other, rng):
        out = scaled_dot_attention(q, k_own, v_own, mask, p_dropout, training, rng)
        if lam != 0.0:
            cross = scaled_dot_attention(q, k_other, v_other, mask, p_dropout, training, rng)
            out = nx.add(out, nx.scale(act(cross), lam))
        return nx.matmul(merge_heads(out), proj.wo)

    h_fwd = one_flow(qf, kf, vf, kb, vb, rng_fwd)
    h_bwd = one_flow(qb, kb, vb, kf, vf, rng_bwd)
    return h_fwd, h_bwd
