"""Incremental (single-position) decoding with per-layer key/value caches.

A DecodeSession advances both flows one position at a time, caching each
layer's key/value projections so step t costs O(t) instead of O(t^2). It runs
on raw numpy (inference only, no gradients) and mirrors the teacher-forced
decoder exactly: the equivalence is pinned by tests, including the case where
a finished flow keeps consuming padding tokens (the decoding modules extend a
finished flow with pads so step distributions match a teacher-forced pass over
the padded pair).

Word-level ensembles are handled here: a session over M parameter sets returns
the arithmetic mean of the M next-token distributions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from . import numerics as nx
from .errors import ConfigError, ContractError
from .model import ModelConfig, ParameterSet

FWD = "fwd"
BWD = "bwd"


class _ModelLane:
    """Per-model compute state: weights as raw arrays plus per-layer caches."""

    def __init__(self, params: ParameterSet, ctx: np.ndarray, n_fwd: int, n_bwd: int,
                 max_steps: int):
        c = params.config
        self.config = c
        self.dtype = np.dtype(params.dtype)
        self.w = {name: t.data for name, t in params.named()}
        self.pe = nx.sinusoid_table(c.max_positions, c.d_model, self.dtype)
        self.emb_scale = float(np.sqrt(c.d_model))
        ctx = np.asarray(ctx, dtype=self.dtype)
        if ctx.ndim != 2 or ctx.shape[1] != c.d_model:
            raise ContractError(
                f"session context must be (n_regions, d_model), got {ctx.shape}"
            )
        # cross-attention keys/values over the encoded regions are constant
        self.ctx_kv = []
        for i in range(c.n_layers):
            kc = ctx @ self.w[f"dec.{i}.cross_attn.wk"]
            vc = ctx @ self.w[f"dec.{i}.cross_attn.wv"]
            self.ctx_kv.append((kc, vc))
        hdk = c.n_heads * c.d_k
        hdv = c.n_heads * c.d_v
        self.cache = {
            flow: [
                {
                    "k": np.zeros((n, max_steps, hdk), dtype=self.dtype),
                    "v": np.zeros((n, max_steps, hdv), dtype=self.dtype),
                }
                for _ in range(c.n_layers)
            ]
            for flow, n in ((FWD, n_fwd), (BWD, n_bwd))
        }

    def reorder(self, flow: str, parents: np.ndarray) -> None:
        for layer in self.cache[flow]:
            layer["k"] = np.ascontiguousarray(layer["k"][parents])
            layer["v"] = np.ascontiguousarray(layer["v"][parents])

    def _norm(self, x: np.ndarray, prefix: str) -> np.ndarray:
        out, _, _ = kernels.layer_norm_rows(
            np.ascontiguousarray(x), self.w[f"{prefix}.g"], self.w[f"{prefix}.b"], 1e-5
        )
        return out

    def _ffn(self, x: np.ndarray, prefix: str) -> np.ndarray:
        h = np.maximum(x @ self.w[f"{prefix}.w1"] + self.w[f"{prefix}.b1"], 0.0)
        return h @ self.w[f"{prefix}.w2"] + self.w[f"{prefix}.b2"]

    def _ctx_attention(self, h: np.ndarray, layer: int) -> np.ndarray:
        c = self.config
        kc, vc = self.ctx_kv[layer]
        q = h @ self.w[f"dec.{layer}.cross_attn.wq"]
        qh = q.reshape(-1, c.n_heads, c.d_k)
        kh = kc.reshape(-1, c.n_heads, c.d_k)
        vh = vc.reshape(-1, c.n_heads, c.d_v)
        scores = np.einsum("nhd,rhd->nhr", qh, kh) * (1.0 / float(np.sqrt(c.d_k)))
        scores -= scores.max(axis=2, keepdims=True)
        w = np.exp(scores)
        w /= w.sum(axis=2, keepdims=True)
        out = np.einsum("nhr,rhd->nhd", w, vh).reshape(h.shape[0], c.n_heads * c.d_v)
        return out @ self.w[f"dec.{layer}.cross_attn.wo"]

    def step(self, t: int, fwd_tokens: np.ndarray, bwd_tokens: np.ndarray,
             f2b: np.ndarray | None, b2f: np.ndarray | None
             ) -> tuple[np.ndarray, np.ndarray]:
        c = self.config
        act = np.tanh if c.af == "tanh" else (lambda a: np.maximum(a, 0.0))
        pe = self.pe[t]
        hs = {
            FWD: self.w["tok_emb"][fwd_tokens] * self.emb_scale + pe,
            BWD: self.w["tok_emb"][bwd_tokens] * self.emb_scale + pe,
        }
        use_cross = c.lam != 0.0
        for i in range(c.n_layers):
            # both flows project and append before either flow attends, so the
            # cross term can see the other flow's position t
            for flow in (FWD, BWD):
                h = hs[flow]
                cache = self.cache[flow][i]
                cache["k"][:, t] = h @ self.w[f"dec.{i}.self_attn.wk"]
                cache["v"][:, t] = h @ self.w[f"dec.{i}.self_attn.wv"]
            for flow, pair_map in ((FWD, f2b), (BWD, b2f)):
                h = hs[flow]
                other = BWD if flow == FWD else FWD
                q = h @ self.w[f"dec.{i}.self_attn.wq"]
                own = self.cache[flow][i]
                out = kernels.attention_step(
                    q, own["k"][:, : t + 1], own["v"][:, : t + 1], c.n_heads
                )
                if use_cross:
                    oc = self.cache[other][i]
                    keys = oc["k"][pair_map, : t + 1]
                    values = oc["v"][pair_map, : t + 1]
                    cross = kernels.attention_step(q, keys, values, c.n_heads)
                    out = out + c.lam * act(cross)
                out = out @ self.w[f"dec.{i}.self_attn.wo"]
                h = self._norm(h + out, f"dec.{i}.norm1")
                h = self._norm(h + self._ctx_attention(h, i), f"dec.{i}.norm2")
                h = self._norm(h + self._ffn(h, f"dec.{i}.ffn"), f"dec.{i}.norm3")
                hs[flow] = h
        dists = []
        for flow in (FWD, BWD):
            logits = hs[flow] @ self.w["out_proj.w"] + self.w["out_proj.b"]
            dists.append(kernels.softmax_rows(np.ascontiguousarray(logits)))
        return dists[0], dists[1]


class DecodeSession:
    """Step-synchronous incremental decoding state over one image.

    models/ctxs: one ParameterSet and one encoded-region array per ensemble
    member (a single model is the one-element ensemble). n_fwd/n_bwd lanes
    advance in lockstep; `f2b`/`b2f` passed to `step` say which opposing lane
    each lane reads as cross-flow context (identity by default).
    """

    def __init__(self, models, ctxs, n_fwd: int = 1, n_bwd: int = 1,
                 max_steps: int | None = None):
        if isinstance(models, ParameterSet):
            models = [models]
            ctxs = [ctxs]
        if len(models) != len(ctxs):
            raise ContractError("need one context per model")
        if not models:
            raise ContractError("need at least one model")
        vocab = models[0].config.vocab_size
        for m in models[1:]:
            if m.config.vocab_size != vocab:
                raise ConfigError(
                    f"ensemble vocabulary mismatch: {m.config.vocab_size} != {vocab}"
                )
        self.vocab_size = vocab
        self.n = {FWD: n_fwd, BWD: n_bwd}
        self.max_steps = max_steps or min(m.config.max_positions for m in models)
        self.t = 0
        self._lanes = [
            _ModelLane(m, c, n_fwd, n_bwd, self.max_steps) for m, c in zip(models, ctxs)
        ]

    @property
    def position(self) -> int:
        return self.t

    def reorder(self, flow: str, parents) -> None:
        """Re-gather a flow's lanes by parent index (beam reordering); the lane
        count may grow or shrink."""
        parents = np.asarray(parents, dtype=np.int64)
        for lane in self._lanes:
            lane.reorder(flow, parents)
        self.n[flow] = len(parents)

    def step(self, fwd_tokens, bwd_tokens, f2b=None, b2f=None
             ) -> tuple[np.ndarray, np.ndarray]:
        """Append one input position per flow; return the next-token
        distributions (mean over ensemble members), shapes (n_fwd, V)/(n_bwd, V)."""
        if self.t >= self.max_steps:
            raise ContractError(f"session exhausted its {self.max_steps} positions")
        fwd_tokens = np.asarray(fwd_tokens, dtype=np.int64)
        bwd_tokens = np.asarray(bwd_tokens, dtype=np.int64)
        if fwd_tokens.shape != (self.n[FWD],) or bwd_tokens.shape != (self.n[BWD],):
            raise ContractError(
                f"token arrays must be ({self.n[FWD]},)/({self.n[BWD]},), "
                f"got {fwd_tokens.shape}/{bwd_tokens.shape}"
            )
        f2b = self._pair_map(f2b, self.n[FWD], self.n[BWD])
        b2f = self._pair_map(b2f, self.n[BWD], self.n[FWD])
        dist_f = np.zeros((self.n[FWD], self.vocab_size), dtype=np.float64)
        dist_b = np.zeros((self.n[BWD], self.vocab_size), dtype=np.float64)
        for lane in self._lanes:
            df, db = lane.step(self.t, fwd_tokens, bwd_tokens, f2b, b2f)
            dist_f += df
            dist_b += db
        dist_f /= len(self._lanes)
        dist_b /= len(self._lanes)
        self.t += 1
        return dist_f, dist_b

    @staticmethod
    def _pair_map(given, n_own: int, n_other: int) -> np.ndarray:
        if given is not None:
            m = np.asarray(given, dtype=np.int64)
            if m.shape != (n_own,) or (m.size and (m.min() < 0 or m.max() >= n_other)):
                raise ContractError(f"bad cross-flow pairing map {m} for {n_other} lanes")
            return m
        # rank-aligned by default, clamped when the flows have unequal widths
        return np.minimum(np.arange(n_own, dtype=np.int64), max(n_other - 1, 0))


@dataclass
class IncrementalState:
    """Opaque cache handle for decode_step."""

    session: DecodeSession
    params_ref: int


def decode_step(ctx, state: IncrementalState | None, next_fwd_token: int,
                next_bwd_token: int, params: ParameterSet, config: ModelConfig
                ) -> tuple[np.ndarray, np.ndarray, IncrementalState]:
    """Advance both flows by one position.

    Returns the two next-token probability distributions (each sums to one)
    and the extended state. Pass state=None on the first call; the context is
    the encoded region features (n_regions, d_model).
    """
    if state is None:
        ctx_arr = ctx.data if isinstance(ctx, nx.Tensor) else np.asarray(ctx)
        session = DecodeSession([params], [ctx_arr], 1, 1, config.max_positions)
        state = IncrementalState(session, id(params))
    elif state.params_ref != id(params):
        raise ContractError("decode_step state was built for a different parameter set")
    dist_f, dist_b = state.session.step([next_fwd_token], [next_bwd_token])
    return dist_f[0], dist_b[0], state
