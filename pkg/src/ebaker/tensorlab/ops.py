"""Differentiable primitives.

All ops take :class:`Tensor` (or array-likes, promoted to constants) and
return a new tensor.  Binary elementwise ops broadcast numpy-style; the
backward pass sums gradients back down to each input's shape.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# elementwise ----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return Tensor._result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return Tensor._result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(out, (a, b), backward, "mul")


multiply = mul


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return Tensor._result(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return Tensor._result(a.data * c, (a,), lambda g: (g * c,), "scale")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor._result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def square(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


QUICK_GELU_SLOPE = 1.702


def quick_gelu(a) -> Tensor:
    """x * sigmoid(1.702 x)."""
    a = as_tensor(a)
    s = _sigmoid(QUICK_GELU_SLOPE * a.data)
    out = a.data * s

    def backward(g):
        return (g * (s + QUICK_GELU_SLOPE * a.data * s * (1.0 - s)),)

    return Tensor._result(out, (a,), backward, "quick_gelu")


def where(mask, a, b) -> Tensor:
    """Select ``a`` where ``mask`` is true, else ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    m = np.asarray(mask, dtype=bool)
    out = np.where(m, a.data, b.data)

    def backward(g):
        return _unbroadcast(np.where(m, g, 0.0), a.shape), _unbroadcast(np.where(m, 0.0, g), b.shape)

    return Tensor._result(out, (a, b), backward, "where")


def masked_fill(a, mask, value: float) -> Tensor:
    a = as_tensor(a)
    m = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    out = np.where(m, value, a.data)
    return Tensor._result(out, (a,), lambda g: (np.where(m, 0.0, g),), "masked_fill")


# reductions and shape -------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    axes = _norm_axis(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._result(np.asarray(out), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / max(count, 1))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return Tensor._result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)
    return Tensor._result(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    out = np.swapaxes(a.data, ax1, ax2)
    return Tensor._result(out, (a,), lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def index(a, idx) -> Tensor:
    """Basic or advanced indexing; the gradient scatters back with np.add.at."""
    a = as_tensor(a)
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.int64)
    out = np.asarray(a.data[idx])

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._result(out.copy(), (a,), backward, "index")


def take_rows(a, indices) -> Tensor:
    """Gather along axis 0 with integer ``indices`` of any shape."""
    a = as_tensor(a)
    ids = np.asarray(indices, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= a.shape[0]):
        raise IndexError(f"row index out of range for {a.shape[0]} rows")
    out = a.data[ids]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, ids.reshape(-1), g.reshape((-1,) + a.shape[1:]))
        return (full,)

    return Tensor._result(out, (a,), backward, "take_rows")


def embedding_lookup(table, token_ids) -> Tensor:
    return take_rows(table, token_ids)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of nothing")
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._result(out, ts, backward, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return Tensor._result(out, ts, backward, "stack")


# linear algebra -------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._result(out, (a, b), backward, "matmul")


def einsum(spec: str, *operands) -> Tensor:
    """Explicit-output einsum over one or two operands.

    Each input index must be unique within its operand and appear either
    in the output or in the other operand, so the gradient is itself a
    single einsum.
    """
    ts = [as_tensor(t) for t in operands]
    if "->" not in spec:
        raise ShapeError("einsum needs an explicit '->' output")
    lhs, out_sub = spec.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(ts) or len(ts) not in (1, 2):
        raise ShapeError("einsum supports one or two operands")
    for sub_ in in_subs:
        if len(set(sub_)) != len(sub_):
            raise ShapeError(f"repeated index in operand {sub_!r}")
    try:
        out = np.einsum(spec, *[t.data for t in ts], optimize=True)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None

    if len(ts) == 1:
        (a,), (sa,) = ts, in_subs
        if set(out_sub) - set(sa):
            raise ShapeError("single-operand einsum cannot introduce new indices")
        kept = "".join(c for c in sa if c in out_sub)
        dropped = tuple(i for i, c in enumerate(sa) if c not in out_sub)

        def backward(g):
            gx = np.expand_dims(np.einsum(f"{out_sub}->{kept}", g), dropped)
            return (np.broadcast_to(gx, a.shape).copy(),)

        return Tensor._result(np.asarray(out), ts, backward, "einsum")

    a, b = ts
    sa, sb = in_subs
    for sub_, other in ((sa, sb), (sb, sa)):
        missing = set(sub_) - set(out_sub) - set(other)
        if missing:
            raise ShapeError(f"index {sorted(missing)} summed within one operand is unsupported")

    def backward(g):
        ga = np.einsum(f"{out_sub},{sb}->{sa}", g, b.data, optimize=True) if a.requires_grad else None
        gb = np.einsum(f"{out_sub},{sa}->{sb}", g, a.data, optimize=True) if b.requires_grad else None
        return ga, gb

    return Tensor._result(np.asarray(out), ts, backward, "einsum")


# normalisation / probabilistic ----------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._result(out, (a,), backward, "softmax")


def softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {a.shape}")
    return softmax(a, axis=1)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(out, (a,), backward, "log_softmax")


def cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under softmax(logits).

    ``logits`` is (M, V).  M = 0 yields a zero loss that is still attached
    to the graph (with zero gradient).
    """
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (M, V) logits, got {logits.shape}")
    m, v = logits.shape
    if t.shape[0] != m:
        raise ShapeError(f"{t.shape[0]} targets for {m} rows")
    if m == 0:
        return Tensor._result(np.zeros(()), (logits,), lambda g: (np.zeros(logits.shape),), "cross_entropy")
    if t.min() < 0 or t.max() >= v:
        raise IndexError("target id outside vocabulary")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(m)
    loss = np.mean(lse - z[rows, t])

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, t] -= 1.0
        return (p * (g / m),)

    return Tensor._result(np.asarray(loss), (logits,), backward, "cross_entropy")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply ``gain * xhat + bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if d < 1:
        raise ShapeError("layer_norm over an empty axis")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"gain/bias must be ({d},), got {gain.shape} and {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._result(out, (x, gain, bias), backward, "layer_norm")


def l2_norm(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(out > 0, a.data / out, 0.0)
        return (g * ratio,)

    res = out if keepdims else np.squeeze(out, axis=axis)
    return Tensor._result(res, (a,), backward, "l2_norm")


def normalize(a, axis: int = -1) -> Tensor:
    """Unit-normalise along ``axis``; zero vectors are an error."""
    a = as_tensor(a)
    n = l2_norm(a, axis=axis, keepdims=True)
    if np.any(n.data == 0):
        raise ZeroDivisionError("cannot normalise a zero-norm vector")
    return div(a, n)


def cosine_rows(a, b) -> Tensor:
    """(m, d) x (n, d) -> (m, n) matrix of pairwise cosines."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_rows needs (m,d) and (n,d), got {a.shape} and {b.shape}")
    return matmul(normalize(a, axis=1), swapaxes(normalize(b, axis=1), 0, 1))


def mean_pool(x, mask=None, axis: int = -2) -> Tensor:
    """Mean over ``axis``; ``mask`` (broadcastable, 1 = keep) restricts the average."""
    x = as_tensor(x)
    if mask is None:
        return mean(x, axis=axis)
    m = np.asarray(mask, dtype=np.float64)
    m = np.expand_dims(m, -1) if m.ndim == x.ndim - 1 else m
    count = m.sum(axis=axis, keepdims=True)
    if np.any(count == 0):
        raise ZeroDivisionError("mean_pool over an all-masked slice")
    return sum(mul(x, m / count), axis=axis)


def scaled_dot_product_attention(q, k, v, mask=None) -> Tensor:
    """softmax(q k^T / sqrt(d) + mask) v over the last two axes.

    ``mask`` is boolean, broadcastable to the score shape, True = blocked.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    d = q.shape[-1]
    scores = scale(matmul(q, swapaxes(k, -1, -2)), 1.0 / np.sqrt(d))
    if mask is not None:
        scores = masked_fill(scores, mask, -1e9)
    return matmul(softmax(scores, axis=-1), v)


def causal_mask(n: int) -> np.ndarray:
    return np.triu(np.ones((n, n), dtype=bool), k=1)

