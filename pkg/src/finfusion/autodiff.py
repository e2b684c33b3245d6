"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every learnable component in the package is built from the primitives here.
Ops record onto the innermost active ``Tape``; ``backward`` replays the tape
in exact reverse order. Tensors created outside a tape are plain values.

Broadcasting is deliberately narrow: equal shapes, scalars, or a lower-rank
operand aligned against the trailing dimensions (size-1 expansion allowed).
Anything fancier must go through an explicit reshape so backward rules stay
auditable.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericalError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "grad_check",
    "custom_op",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "pow_const",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "sigmoid",
    "relu",
    "leaky_relu",
    "elu",
    "matmul",
    "reduce_sum",
    "reduce_mean",
    "logsumexp",
    "softmax",
    "layer_norm",
    "cross_entropy",
    "reshape",
    "transpose",
    "concat",
    "slice_axis",
    "take_rows",
    "stack",
]

_EPS_MASK = -1e9  # additive mask value; exp underflows to exactly 0.0


def _require_finite(arr: np.ndarray, context: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in {context}")


class Tensor:
    """A shaped float64 value, optionally a trainable leaf.

    ``requires_grad=True`` at construction marks a leaf: a ``grad`` buffer is
    allocated and ``backward`` accumulates into it. Tensors produced by ops
    carry the flag when a parent does, but keep ``grad=None``; their adjoints
    live only for the duration of a backward pass.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True)
        _require_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Flat read-only view of the underlying buffer."""
        flat = self.data.ravel()
        flat.flags.writeable = False
        return flat

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() on tensor of size {self.size}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; all routes through the module-level primitives
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _TapeOp:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out, parents, backward_fn):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


class Tape:
    """Execution-ordered record of differentiable ops.

    Use as a context manager; ops executed inside record themselves when any
    input requires grad. One tape serves one single-threaded evaluation.
    """

    def __init__(self):
        self.ops: list[_TapeOp] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _ACTIVE_TAPES.pop()
        assert popped is self, "tape context unwound out of order"
        return False

    def __len__(self) -> int:
        return len(self.ops)


_ACTIVE_TAPES: list[Tape] = []


def custom_op(data: np.ndarray, parents: Sequence[Tensor],
              backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    """Create an op result with a hand-written backward rule.

    ``backward_fn`` maps the output adjoint to one adjoint per parent (None
    for non-differentiable slots). Extension point for fused primitives that
    live outside this module.
    """
    arr = np.asarray(data, dtype=np.float64)
    _require_finite(arr, "op output")
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.requires_grad = False
    out.grad = None
    tape = _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.ops.append(_TapeOp(out, tuple(parents), backward_fn))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate leaf gradients with d(loss)/d(leaf).

    Visits the tape in exact reverse execution order. Repeated calls
    accumulate into leaf ``grad`` buffers until they are cleared.
    """
    if loss.size != 1:
        raise ContractError("backward requires a scalar loss")
    adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss.grad is not None:
        loss.grad += 1.0
    for op in reversed(tape.ops):
        g = adjoints.pop(id(op.out), None)
        if g is None:
            continue
        parent_grads = op.backward_fn(g)
        for parent, pg in zip(op.parents, parent_grads):
            if pg is None:
                continue
            if parent.grad is not None:
                parent.grad += pg
            elif parent.requires_grad:
                prev = adjoints.get(id(parent))
                adjoints[id(parent)] = pg if prev is None else prev + pg


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic map from ``x`` to a scalar tensor. Relative
    error per coordinate is |analytic - fd| / max(1, |fd|).
    """
    if x.grad is None:
        raise ContractError("grad_check target must be a requires_grad leaf")
    saved_grad = x.grad.copy()
    x.zero_grad()
    with Tape() as tape:
        out = f(x)
    if out.size != 1:
        raise ContractError("grad_check function must return a scalar")
    backward(out, tape)
    analytic = x.grad.copy()
    x.grad[...] = saved_grad

    flat = x.data.flat
    fd = np.zeros(x.size)
    for i in range(x.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x).item()
        flat[i] = orig - eps
        lo = f(x).item()
        flat[i] = orig
        fd[i] = (hi - lo) / (2.0 * eps)
    _require_finite(fd, "finite-difference estimates")
    denom = np.maximum(1.0, np.abs(fd))
    rel = np.abs(analytic.ravel() - fd) / denom
    return float(rel.max()) if rel.size else 0.0


# ---------------------------------------------------------------------------
# broadcasting helpers

def _check_broadcast(a_shape: tuple, b_shape: tuple) -> None:
    """Permit equal shapes, scalars, and trailing-dimension expansion only."""
    if a_shape == b_shape:
        return
    small, big = sorted((a_shape, b_shape), key=len)
    offset = len(big) - len(small)
    for i, dim in enumerate(small):
        if dim != big[offset + i] and dim != 1 and big[offset + i] != 1:
            raise DimensionError(f"shapes {a_shape} and {b_shape} do not broadcast")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise binary ops

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return custom_op(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return custom_op(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return custom_op(out, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    out = a.data / b.data

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return custom_op(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# elementwise unary ops

def neg(a: Tensor) -> Tensor:
    return custom_op(-a.data, (a,), lambda g: (-g,))


def pow_const(a: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    out = a.data ** p

    def bwd(g):
        return (g * p * a.data ** (p - 1.0),)

    return custom_op(out, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    _require_finite(out, "exp")
    return custom_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(a.data)
    _require_finite(out, "log")
    return custom_op(out, (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    _require_finite(out, "sqrt")
    return custom_op(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return custom_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-np.clip(a.data, -500, 500)))
    return custom_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return custom_op(out, (a,), lambda g: (g * (a.data > 0.0),))


def leaky_relu(a: Tensor, alpha: float = 0.2) -> Tensor:
    out = np.where(a.data > 0.0, a.data, alpha * a.data)

    def bwd(g):
        return (g * np.where(a.data > 0.0, 1.0, alpha),)

    return custom_op(out, (a,), bwd)


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    ex = np.exp(np.minimum(a.data, 0.0))
    out = np.where(a.data > 0.0, a.data, alpha * (ex - 1.0))

    def bwd(g):
        return (g * np.where(a.data > 0.0, 1.0, alpha * ex),)

    return custom_op(out, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch dimensions must match or be absent."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise DimensionError("matmul requires at least 1-d operands")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else -1]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dims disagree: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)
    _require_finite(out, "matmul")

    def bwd(g):
        if a.ndim == 1 and b.ndim == 1:
            return g * b.data, g * a.data
        if a.ndim == 1:
            # (k,) x (..., k, n) -> (..., n)
            ga = np.matmul(g[..., None, :], np.swapaxes(b.data, -1, -2))[..., 0, :]
            gb = a.data[:, None] * g[..., None, :]
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
        if b.ndim == 1:
            # (..., m, k) x (k,) -> (..., m)
            ga = g[..., :, None] * b.data[None, :]
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g[..., :, None])[..., 0]
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return custom_op(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# reductions

def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axes)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return custom_op(out, (a,), bwd)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if a.ndim else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bwd(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axes)
        return (np.broadcast_to(gg, a.shape).copy() / count,)

    return custom_op(out, (a,), bwd)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    ax = axis % a.ndim
    m = a.data.max(axis=ax, keepdims=True)
    shifted = np.exp(a.data - m)
    total = shifted.sum(axis=ax, keepdims=True)
    out = (m + np.log(total)).squeeze(ax)

    def bwd(g):
        soft = shifted / total
        return (np.expand_dims(g, ax) * soft,)

    return custom_op(out, (a,), bwd)


# ---------------------------------------------------------------------------
# fused neural-net primitives

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along ``axis``; slices sum to 1."""
    ax = axis % a.ndim
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=ax, keepdims=True)

    def bwd(g):
        inner = (g * out).sum(axis=ax, keepdims=True)
        return (out * (g - inner),)

    return custom_op(out, (a,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last dimension to zero mean, unit variance, then affine."""
    gain, bias = _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if d < 1:
        raise DimensionError("layer_norm needs a nonempty last dimension")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        gg = g * gain.data
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gg - m1 - xhat * m2)
        ggain = _unbroadcast(g * xhat, gain.shape)
        gbias = _unbroadcast(g, bias.shape)
        return gx, ggain, gbias

    return custom_op(out, (x, gain, bias), bwd)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log softmax probability of the true class."""
    ids = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise DimensionError("cross_entropy expects (n, classes) logits")
    n, c = logits.shape
    if ids.shape != (n,):
        raise DimensionError(f"labels shape {ids.shape} does not match {n} rows")
    if ids.min(initial=0) < 0 or ids.max(initial=-1) >= c:
        raise IndexError("label outside [0, classes)")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    out = -logp[np.arange(n), ids].mean()

    def bwd(g):
        soft = np.exp(logp)
        soft[np.arange(n), ids] -= 1.0
        return (g * soft / n,)

    return custom_op(out, (logits,), bwd)


# ---------------------------------------------------------------------------
# shape ops

def reshape(a: Tensor, shape) -> Tensor:
    new_shape = tuple(shape)
    out = a.data.reshape(new_shape)
    return custom_op(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    perm = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = np.argsort(perm)
    out = a.data.transpose(perm)
    return custom_op(out, (a,), lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("concat of empty sequence")
    ax = axis % ts[0].ndim
    out = np.concatenate([t.data for t in ts], axis=ax)
    sizes = [t.shape[ax] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=ax))

    return custom_op(out, tuple(ts), bwd)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = axis % a.ndim
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    out = a.data[idx]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return custom_op(out, (a,), bwd)


def take_rows(table: Tensor, ids) -> Tensor:
    """Row gather (embedding lookup); backward scatter-adds."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.min(initial=0) < 0 or idx.max(initial=-1) >= table.shape[0]:
        raise IndexError("row index outside table")
    out = table.data[idx]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return custom_op(out, (table,), bwd)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts]
    return concat(expanded, axis=axis)


def masked_fill_logits(logits: Tensor, keep_mask: np.ndarray) -> Tensor:
    """Push masked-out logits to a value whose softmax weight underflows to 0."""
    penalty = Tensor(np.where(np.asarray(keep_mask, dtype=bool), 0.0, _EPS_MASK))
    return add(logits, penalty)
