"""Dense-tensor engine with reverse-mode automatic differentiation.

Tensor values are numpy arrays. Every operation that consumes a tensor
requiring gradients records itself on the output; `backward` replays the
implicit DAG exactly once in reverse topological order and accumulates
gradients on the leaves. Tensors are immutable values after creation.

Precision: float32 is the default for training speed. Finite differences are
unreliable at 32-bit, so gradient checks switch the engine to float64 via
`set_default_dtype` (or build tensors with an explicit dtype).
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ContractError, InputError, ShapeError

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    """Set the dtype used for tensors built from Python data ("float32"/"float64")."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"unsupported default dtype {dt}")
    _DEFAULT_DTYPE = dt.type


def default_dtype():
    return _DEFAULT_DTYPE


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / oracle passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """An immutable dense array plus an optional gradient slot.

    `_parents` and `_backward` carry the recorded operation that produced this
    tensor; both are cleared when `backward` releases the graph.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise ContractError("cannot wrap a Tensor in a Tensor")
        if isinstance(data, np.ndarray):
            arr = data
        else:
            arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars and arrays are wrapped as constants
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents, backward_fn) -> Tensor:
    """Build an op output, recording the edge only when gradients can flow."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    record = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = record
    out._parents = tuple(parents) if record else ()
    out._backward = backward_fn if record else None
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a Python scalar without creating a constant tensor."""
    s = float(s)
    return _make(a.data * s, (a,), lambda g: (g * s,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with broadcasting over leading batch dimensions."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(data, (a, b), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)
    orig = a.shape
    return _make(data, (a,), lambda g: (g.reshape(orig),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    data = np.swapaxes(a.data, ax1, ax2)
    return _make(data, (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    data = np.where(mask, a.data, a.dtype.type(0))
    return _make(data, (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)
    return _make(data, (a,), lambda g: (g * (1.0 - data * data),))


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements (scalar output)."""
    data = np.asarray(a.data.sum(), dtype=a.dtype)
    shape = a.shape
    return _make(data, (a,), lambda g: (np.broadcast_to(g, shape).astype(a.dtype),))


def tmean(a: Tensor) -> Tensor:
    return scale(tsum(a), 1.0 / a.size)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along `axis`; rows sum to one for any finite input."""
    axis = axis if axis >= 0 else a.ndim + axis
    if not 0 <= axis < a.ndim:
        raise ContractError(f"softmax axis {axis} invalid for shape {a.shape}")
    moved = np.moveaxis(a.data, axis, -1)
    flat = np.ascontiguousarray(moved.reshape(-1, moved.shape[-1]))
    p_flat = kernels.softmax_rows(flat)
    p = np.moveaxis(p_flat.reshape(moved.shape), -1, axis)

    def bwd(g):
        g_moved = np.ascontiguousarray(
            np.moveaxis(g, axis, -1).reshape(-1, moved.shape[-1])
        )
        gx = kernels.softmax_rows_backward(p_flat, g_moved)
        return (np.moveaxis(gx.reshape(moved.shape), -1, axis),)

    return _make(p, (a,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm gain/bias must be ({d},), got {gain.shape}/{bias.shape}"
        )
    flat = np.ascontiguousarray(x.data.reshape(-1, d))
    out, xhat, inv_std = kernels.layer_norm_rows(flat, gain.data, bias.data, eps)

    def bwd(g):
        g2 = np.ascontiguousarray(g.reshape(-1, d))
        gx, ggain, gbias = kernels.layer_norm_rows_backward(g2, xhat, inv_std, gain.data)
        return gx.reshape(x.shape), ggain, gbias

    return _make(out.reshape(x.shape), (x, gain, bias), bwd)


def dropout(x: Tensor, p: float, training: bool, rng=None) -> Tensor:
    """Inverted dropout: scales kept units by 1/(1-p) so inference needs no rescale.

    With training=False or p=0 this is the identity map (the same tensor is
    returned, bit-exact)."""
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {p}")
    if rng is None:
        raise ContractError("dropout(training=True) requires an explicit rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype)
    keep /= x.dtype.type(1.0 - p)
    return mul(x, Tensor(keep))


def embed(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup into an embedding table; gradient scatter-adds into the table."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError(f"embed ids must be integers, got dtype {ids.dtype}")
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(
            f"embed ids out of range [0, {n}): min={ids.min()}, max={ids.max()}"
        )
    data = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        kernels.scatter_add_rows(
            gt,
            np.ascontiguousarray(ids.reshape(-1), dtype=np.int64),
            np.ascontiguousarray(g.reshape(-1, table.shape[1])),
        )
        return (gt,)

    return _make(data, (table,), bwd)


def log_softmax_nll(
    logits: Tensor,
    targets: np.ndarray,
    ignore_index: int = -1,
    weights: np.ndarray | None = None,
    normalize: bool = True,
) -> Tensor:
    """Fused log-softmax + negative log likelihood.

    targets has the shape of logits minus the last axis. Positions equal to
    `ignore_index` contribute nothing. `weights` (optional, same shape as
    targets, treated as constants) scale each position's term. The result is
    the weighted NLL sum divided by the number of non-ignored positions when
    `normalize` is true, else the raw sum.
    """
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ContractError(
            f"targets shape {targets.shape} does not match logits {logits.shape}"
        )
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    tgt = targets.reshape(-1)
    mask = tgt != ignore_index
    count = int(mask.sum())
    if count == 0:
        raise InputError("log_softmax_nll: every target position is ignored")
    safe_tgt = np.where(mask, tgt, 0)
    if safe_tgt.min() < 0 or safe_tgt.max() >= v:
        raise IndexError(f"target ids out of range [0, {v})")

    m = flat.max(axis=1, keepdims=True)
    shifted = flat - m
    lse = np.log(np.exp(shifted).sum(axis=1)) + m[:, 0]
    logp = flat[np.arange(flat.shape[0]), safe_tgt] - lse

    w = np.ones(flat.shape[0], dtype=flat.dtype)
    if weights is not None:
        w = np.asarray(weights, dtype=flat.dtype).reshape(-1).copy()
    w *= mask
    denom = float(count) if normalize else 1.0
    loss = np.asarray(-(w * logp).sum() / denom, dtype=flat.dtype)

    def bwd(g):
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(flat.shape[0]), safe_tgt] -= 1.0
        p *= (w * (float(g) / denom))[:, None]
        return (p.reshape(logits.shape),)

    return _make(loss, (logits,), bwd)


# ---------------------------------------------------------------------------
# backward pass and gradient checking
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> dict:
    """Backpropagate from a scalar loss; returns {leaf Tensor: gradient array}.

    Visits each recorded operation exactly once, in reverse topological order,
    then releases the graph. Leaves that do not lie on any path to the loss are
    absent from the map (their gradient is identically zero).
    """
    if loss.ndim != 0 and loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")

    # iterative topological sort (graphs can be deep)
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_map: dict[Tensor, np.ndarray] = {}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
                leaf_map[node] = node.grad
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node._parents = ()
        node._backward = None
    return leaf_map


@dataclass
class GradCheckReport:
    """Result of a finite-difference gradient check."""

    max_rel_error: float
    tolerance: float
    passed: bool
    per_param: dict = field(default_factory=dict)
    worst_param: str = ""

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (
            f"grad check {status}: max rel err {self.max_rel_error:.3e} "
            f"(tolerance {self.tolerance:.1e}, worst: {self.worst_param or 'n/a'})"
        )


def grad_check(f, params, tolerance: float = 1e-4, step: float = 1e-5) -> GradCheckReport:
    """Compare autodiff gradients of `f()` against central finite differences.

    `f` is a deterministic closure over `params` (a list of (name, Tensor)
    pairs, float64) returning a scalar Tensor. Relative error per element is
    |ad - fd| / max(|ad|, |fd|, 1e-5).
    """
    for name, p in params:
        if p.dtype != np.dtype(np.float64):
            raise ContractError(f"grad_check requires float64 params ({name} is {p.dtype})")
        p.grad = None

    loss = f()
    backward(loss)
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for name, p in params}

    report = GradCheckReport(0.0, tolerance, True)
    for name, p in params:
        fd = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        fd_flat = fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = f().item()
            flat[i] = orig - step
            down = f().item()
            flat[i] = orig
            fd_flat[i] = (up - down) / (2.0 * step)
        a = analytic[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(fd)), 1e-5)
        rel = float((np.abs(a - fd) / denom).max()) if a.size else 0.0
        report.per_param[name] = rel
        if rel > report.max_rel_error:
            report.max_rel_error = rel
            report.worst_param = name
    report.passed = report.max_rel_error < tolerance
    return report


def sinusoid_table(n_positions: int, d_model: int, dtype=np.float32) -> np.ndarray:
    """Deterministic sinusoidal position encodings (never trained)."""
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    dim = np.arange(d_model, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2.0 * (dim // 2)) / d_model)
    table = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(dtype)


def global_norm(arrays) -> float:
    total = 0.0
    for a in arrays:
        total += float((a.astype(np.float64) ** 2).sum())
    return math.sqrt(total)
