"""The encoder-decoder model: configuration, parameters, forward passes and
checkpoint serialization.

One parameter set serves both decoding flows; there is no flow-indexed
parameter anywhere. Parameters are read-only during inference and may be
shared across concurrent decode sessions; training mutates them and is
exclusive.
"""

from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .attention import (
    AttentionMask,
    HeadProjection,
    bidir_interactive_attention,
    multi_head,
)
from .errors import CheckpointError, ConfigError, ContractError, InputError
from .numerics import Tensor


@dataclass
class ModelConfig:
    vocab_size: int
    feature_dim: int
    d_model: int = 512
    d_k: int = 64
    d_v: int = 64
    d_ff: int = 2048
    n_layers: int = 6
    n_heads: int = 8
    p_dropout: float = 0.1
    lam: float = 0.1
    af: str = "relu"
    max_len: int = 16

    def validate(self) -> "ModelConfig":
        if self.n_heads * self.d_v != self.d_model:
            raise ConfigError(
                f"n_heads*d_v must equal d_model "
                f"({self.n_heads}*{self.d_v} != {self.d_model})"
            )
        if self.lam < 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if self.af not in ("relu", "tanh"):
            raise ConfigError(f"af must be relu or tanh, got {self.af!r}")
        if self.vocab_size < 1 or self.feature_dim < 1:
            raise ConfigError("vocab_size and feature_dim must be positive")
        if not 0.0 <= self.p_dropout < 1.0:
            raise ConfigError(f"p_dropout must be in [0, 1), got {self.p_dropout}")
        return self

    @property
    def max_positions(self) -> int:
        # direction prefix + max_len content tokens + eos slot
        return self.max_len + 2


def _xavier(rng, fan_in: int, fan_out: int, shape, dtype) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)


class ParameterSet:
    """Named, ordered collection of trainable tensors for one model."""

    def __init__(self, config: ModelConfig, tensors: "OrderedDict[str, Tensor]"):
        self.config = config
        self.tensors = tensors
        self.dtype = next(iter(tensors.values())).dtype if tensors else np.dtype(np.float32)

    @staticmethod
    def initialize(config: ModelConfig, rng, dtype=np.float32) -> "ParameterSet":
        """Uniform Xavier fan-based init for matrices, zeros for biases,
        layer-norm gain 1 / bias 0."""
        config.validate()
        c = config
        dt = np.dtype(dtype)
        t = OrderedDict()

        def mat(name, fan_in, fan_out, shape=None):
            t[name] = Tensor(
                _xavier(rng, fan_in, fan_out, shape or (fan_in, fan_out), dt),
                requires_grad=True,
            )

        def zeros(name, shape):
            t[name] = Tensor(np.zeros(shape, dtype=dt), requires_grad=True)

        def norm(prefix):
            t[f"{prefix}.g"] = Tensor(np.ones(c.d_model, dtype=dt), requires_grad=True)
            zeros(f"{prefix}.b", c.d_model)

        def proj_block(prefix):
            mat(f"{prefix}.wq", c.d_model, c.n_heads * c.d_k)
            mat(f"{prefix}.wk", c.d_model, c.n_heads * c.d_k)
            mat(f"{prefix}.wv", c.d_model, c.n_heads * c.d_v)
            mat(f"{prefix}.wo", c.n_heads * c.d_v, c.d_model)

        def ffn_block(prefix):
            mat(f"{prefix}.w1", c.d_model, c.d_ff)
            zeros(f"{prefix}.b1", c.d_ff)
            mat(f"{prefix}.w2", c.d_ff, c.d_model)
            zeros(f"{prefix}.b2", c.d_model)

        mat("feat_proj.w", c.feature_dim, c.d_model)
        zeros("feat_proj.b", c.d_model)
        mat("tok_emb", c.vocab_size, c.d_model)
        for i in range(c.n_layers):
            proj_block(f"enc.{i}.attn")
            norm(f"enc.{i}.norm1")
            ffn_block(f"enc.{i}.ffn")
            norm(f"enc.{i}.norm2")
        for i in range(c.n_layers):
            proj_block(f"dec.{i}.self_attn")
            norm(f"dec.{i}.norm1")
            proj_block(f"dec.{i}.cross_attn")
            norm(f"dec.{i}.norm2")
            ffn_block(f"dec.{i}.ffn")
            norm(f"dec.{i}.norm3")
        mat("out_proj.w", c.d_model, c.vocab_size)
        zeros("out_proj.b", c.vocab_size)
        return ParameterSet(config, t)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def named(self):
        return self.tensors.items()

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def head_projection(self, prefix: str) -> HeadProjection:
        t = self.tensors
        return HeadProjection(
            t[f"{prefix}.wq"], t[f"{prefix}.wk"], t[f"{prefix}.wv"],
            t[f"{prefix}.wo"], self.config.n_heads,
        )

    def astype(self, dtype) -> "ParameterSet":
        dt = np.dtype(dtype)
        out = OrderedDict(
            (k, Tensor(v.data.astype(dt), requires_grad=v.requires_grad))
            for k, v in self.tensors.items()
        )
        return ParameterSet(self.config, out)

    def copy(self) -> "ParameterSet":
        return self.astype(self.dtype)


def unidirectional_parameter_count(config: ModelConfig) -> int:
    """Trainable parameter count of the matching one-flow baseline.

    The baseline shares the vocabulary and output projection but starts
    sequences with the end-of-sequence symbol instead of a direction prefix,
    so its embedding table is two rows smaller. The bidirectional model adds
    exactly the two direction-prefix embeddings and nothing else.
    """
    rng = np.random.default_rng(0)
    return ParameterSet.initialize(config, rng).count() - 2 * config.d_model


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def _position_table(config: ModelConfig, dtype) -> np.ndarray:
    return nx.sinusoid_table(config.max_positions, config.d_model, dtype)


def _ffn(x: Tensor, params: ParameterSet, prefix: str) -> Tensor:
    h = nx.add(nx.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"])
    return nx.add(nx.matmul(nx.relu(h), params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def _sublayer(x: Tensor, out: Tensor, params: ParameterSet, norm_prefix: str,
              p_drop: float, training: bool, rng) -> Tensor:
    """Residual add + layer norm (post-norm), with dropout on the sublayer output."""
    out = nx.dropout(out, p_drop, training, rng)
    return nx.layer_norm(nx.add(x, out), params[f"{norm_prefix}.g"], params[f"{norm_prefix}.b"])


def encode(features, params: ParameterSet, config: ModelConfig,
           training: bool = False, rng=None) -> Tensor:
    """Contextualize region features: (B, R, feature_dim) -> (B, R, d_model).

    Also accepts a single image (R, feature_dim) or a RegionFeatureSet; the
    output then keeps the unbatched shape (R, d_model).
    """
    feats = getattr(features, "features", features)
    arr = np.asarray(feats, dtype=params.dtype)
    if arr.ndim == 2:
        squeeze = True
        arr = arr[None]
    elif arr.ndim == 3:
        squeeze = False
    else:
        raise InputError(f"region features must be 2-d or 3-d, got shape {arr.shape}")
    if arr.shape[1] < 1:
        raise InputError("empty region set")
    if arr.shape[2] != config.feature_dim:
        raise InputError(
            f"feature dim {arr.shape[2]} does not match config ({config.feature_dim})"
        )
    p = config.p_dropout
    x = nx.add(nx.matmul(Tensor(arr), params["feat_proj.w"]), params["feat_proj.b"])
    x = nx.dropout(x, p, training, rng)
    for i in range(config.n_layers):
        attn = multi_head(x, x, x, None, params.head_projection(f"enc.{i}.attn"),
                          p, training, rng)
        x = _sublayer(x, attn, params, f"enc.{i}.norm1", p, training, rng)
        ff = _ffn(x, params, f"enc.{i}.ffn")
        x = _sublayer(x, ff, params, f"enc.{i}.norm2", p, training, rng)
    if squeeze:
        x = nx.reshape(x, x.shape[1:])
    return x


def _embed_tokens(ids: np.ndarray, params: ParameterSet, config: ModelConfig) -> Tensor:
    emb = nx.scale(nx.embed(params["tok_emb"], ids), np.sqrt(config.d_model))
    pe = _position_table(config, params.dtype)[: ids.shape[-1]]
    return nx.add(emb, Tensor(pe))


def _check_length(length: int, config: ModelConfig) -> None:
    if length > config.max_positions:
        raise ContractError(
            f"sequence length {length} exceeds position table ({config.max_positions})"
        )


def decode_train_batch(
    ctx: Tensor,
    fwd_in: np.ndarray,
    bwd_in: np.ndarray,
    params: ParameterSet,
    config: ModelConfig,
    training: bool = False,
    rng_fwd=None,
    rng_bwd=None,
) -> tuple[Tensor, Tensor]:
    """Teacher-forced decoder pass over both flows.

    ctx: (B, R, d_model) encoder output; fwd_in/bwd_in: (B, L) shifted token
    ids starting with the direction prefixes. Returns logits (B, L, vocab)
    per flow. Per-flow dropout draws come from independent generators so the
    flows decouple exactly at lam=0.
    """
    if fwd_in.shape != bwd_in.shape:
        raise ContractError(
            f"flow inputs must share a padded shape, got {fwd_in.shape} vs {bwd_in.shape}"
        )
    length = fwd_in.shape[-1]
    _check_length(length, config)
    p = config.p_dropout
    mask = AttentionMask.causal(length, params.dtype)

    hf = nx.dropout(_embed_tokens(fwd_in, params, config), p, training, rng_fwd)
    hb = nx.dropout(_embed_tokens(bwd_in, params, config), p, training, rng_bwd)
    for i in range(config.n_layers):
        af_out, ab_out = bidir_interactive_attention(
            hf, hb, params.head_projection(f"dec.{i}.self_attn"),
            config.lam, config.af, mask, p, training, rng_fwd, rng_bwd,
        )
        hf = _sublayer(hf, af_out, params, f"dec.{i}.norm1", p, training, rng_fwd)
        hb = _sublayer(hb, ab_out, params, f"dec.{i}.norm1", p, training, rng_bwd)
        cross_proj = params.head_projection(f"dec.{i}.cross_attn")
        cf = multi_head(hf, ctx, ctx, None, cross_proj, p, training, rng_fwd)
        hf = _sublayer(hf, cf, params, f"dec.{i}.norm2", p, training, rng_fwd)
        cb = multi_head(hb, ctx, ctx, None, cross_proj, p, training, rng_bwd)
        hb = _sublayer(hb, cb, params, f"dec.{i}.norm2", p, training, rng_bwd)
        hf = _sublayer(hf, _ffn(hf, params, f"dec.{i}.ffn"), params, f"dec.{i}.norm3",
                       p, training, rng_fwd)
        hb = _sublayer(hb, _ffn(hb, params, f"dec.{i}.ffn"), params, f"dec.{i}.norm3",
                       p, training, rng_bwd)
    logits_f = nx.add(nx.matmul(hf, params["out_proj.w"]), params["out_proj.b"])
    logits_b = nx.add(nx.matmul(hb, params["out_proj.w"]), params["out_proj.b"])
    return logits_f, logits_b


def decode_train(ctx: Tensor, pair, params: ParameterSet, config: ModelConfig,
                 training: bool = False, rng_fwd=None, rng_bwd=None
                 ) -> tuple[Tensor, Tensor]:
    """Single-pair wrapper around decode_train_batch; returns (L, vocab) logits."""
    if ctx.ndim == 2:
        ctx = nx.reshape(ctx, (1, *ctx.shape))
    lf, lb = decode_train_batch(
        ctx, pair.fwd_input[None, :], pair.bwd_input[None, :],
        params, config, training, rng_fwd, rng_bwd,
    )
    return nx.reshape(lf, lf.shape[1:]), nx.reshape(lb, lb.shape[1:])


def decode_unidirectional(
    ctx: Tensor,
    tokens: np.ndarray,
    params: ParameterSet,
    config: ModelConfig,
    training: bool = False,
    rng=None,
) -> Tensor:
    """Standard one-flow masked decoder using the same weights.

    This is the baseline the two-flow decoder degrades to at lam=0: same
    sublayer sequence, no cross-flow term. tokens: (B, L) ids.
    """
    length = tokens.shape[-1]
    _check_length(length, config)
    p = config.p_dropout
    mask = AttentionMask.causal(length, params.dtype)
    h = nx.dropout(_embed_tokens(tokens, params, config), p, training, rng)
    for i in range(config.n_layers):
        attn = multi_head(h, h, h, mask, params.head_projection(f"dec.{i}.self_attn"),
                          p, training, rng)
        h = _sublayer(h, attn, params, f"dec.{i}.norm1", p, training, rng)
        cross = multi_head(h, ctx, ctx, None, params.head_projection(f"dec.{i}.cross_attn"),
                           p, training, rng)
        h = _sublayer(h, cross, params, f"dec.{i}.norm2", p, training, rng)
        h = _sublayer(h, _ffn(h, params, f"dec.{i}.ffn"), params, f"dec.{i}.norm3",
                      p, training, rng)
    return nx.add(nx.matmul(h, params["out_proj.w"]), params["out_proj.b"])


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"CBTK1"


def write_tensor_file(path: str, meta: dict, arrays: "OrderedDict[str, np.ndarray]") -> None:
    """Binary tensor container: magic, length-prefixed JSON header (meta plus an
    ordered manifest of name/shape/count), then raw little-endian float32 data
    in manifest order. Written to a temp file and renamed into place."""
    manifest = [[name, list(a.shape), int(a.size)] for name, a in arrays.items()]
    header = json.dumps({"meta": meta, "manifest": manifest}).encode("utf-8")
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for a in arrays.values():
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    os.replace(tmp, path)


def read_tensor_file(path: str) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic or unsupported checkpoint version")
    off = len(CHECKPOINT_MAGIC)
    if len(blob) < off + 4:
        raise CheckpointError(f"{path}: truncated header length")
    (hlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    if len(blob) < off + hlen:
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(blob[off : off + hlen].decode("utf-8"))
    off += hlen
    manifest = header["manifest"]
    total = sum(int(count) for _, _, count in manifest)
    if len(blob) - off != 4 * total:
        raise CheckpointError(
            f"{path}: payload is {len(blob) - off} bytes, manifest expects {4 * total}"
        )
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()
    for name, shape, count in manifest:
        shape = tuple(int(s) for s in shape)
        n = int(np.prod(shape)) if shape else 1
        if n != int(count):
            raise CheckpointError(
                f"{path}: tensor {name!r} shape {shape} disagrees with count {count}"
            )
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape)
        arrays[name] = arr.copy()
        off += 4 * count
    return header["meta"], arrays


def save_checkpoint(params: ParameterSet, config: ModelConfig, path: str) -> None:
    """Persist parameters as float32 (the container's element type)."""
    arrays = OrderedDict((k, v.data) for k, v in params.named())
    write_tensor_file(path, {"kind": "model", "config": asdict(config)}, arrays)


def load_checkpoint(path: str) -> tuple[ParameterSet, ModelConfig]:
    meta, arrays = read_tensor_file(path)
    if meta.get("kind") != "model":
        raise CheckpointError(f"{path}: not a model checkpoint")
    config = ModelConfig(**meta["config"]).validate()
    expected = ParameterSet.initialize(config, np.random.default_rng(0))
    tensors: OrderedDict[str, Tensor] = OrderedDict()
    for name, ref in expected.named():
        if name not in arrays:
            raise CheckpointError(f"{path}: missing tensor {name!r}")
        arr = arrays[name]
        if arr.shape != ref.shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {arr.shape}, config implies {ref.shape}"
            )
        tensors[name] = Tensor(arr, requires_grad=True)
    extra = set(arrays) - set(expected.tensors)
    if extra:
        raise CheckpointError(f"{path}: unexpected tensors {sorted(extra)}")
    return ParameterSet(config, tensors), config
