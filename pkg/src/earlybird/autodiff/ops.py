"""Differentiable primitives.

Each primitive computes its forward value with numpy (or a compiled
kernel), checks shapes, and registers a closure producing input gradients.
"""
from __future__ import annotations

import numpy as np

from .. import kernels
from .tensor import NonFiniteError, ShapeError, Tensor, make_output, strict_enabled

LAYER_NORM_EPS = 1e-5
IGNORE_INDEX = -100


def _check_finite(kind, *tensors):
    if not strict_enabled():
        return
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError(f"{kind}: non-finite input of shape {t.shape}")


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def matmul(a, b):
    """Batched matrix product over the last two axes (numpy broadcasting on batch axes)."""
    _check_finite("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions differ, {a.shape} @ {b.shape} ({a.shape[-1]} != {b.shape[-2]})"
        )
    out = a.data @ b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return make_output("matmul", out, (a, b), backward)


def add(a, b):
    """Elementwise sum; the smaller operand broadcasts over leading axes."""
    _check_finite("add", a, b)
    _broadcast_shape("add", a, b)
    out = a.data + b.data

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return make_output("add", out, (a, b), backward)


def mul(a, b):
    _check_finite("mul", a, b)
    _broadcast_shape("mul", a, b)
    out = a.data * b.data

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return make_output("mul", out, (a, b), backward)


def scale(x, c):
    """Multiply ``x`` by coefficient vector ``c`` along the last axis.

    ``c`` has shape ``(x.shape[-1],)`` or ``(1,)`` (one scalar for all).
    """
    _check_finite("scale", x, c)
    if c.ndim != 1 or c.shape[0] not in (1, x.shape[-1]):
        raise ShapeError(f"scale: coefficient shape {c.shape} does not fit input {x.shape}")
    out = x.data * c.data

    def backward(g):
        gx = g * c.data if x.requires_grad else None
        gc = None
        if c.requires_grad:
            gc = (g * x.data).reshape(-1, x.shape[-1]).sum(axis=0)
            if c.shape[0] == 1:
                gc = gc.sum(keepdims=True)
        return gx, gc

    return make_output("scale", out, (x, c), backward)


def mul_const(x, s):
    _check_finite("mul_const", x)
    s = float(s)
    out = x.data * x.data.dtype.type(s)

    def backward(g):
        return (g * x.data.dtype.type(s),)

    return make_output("mul_const", out, (x,), backward, factor=s)


def relu(x):
    _check_finite("relu", x)
    out = np.maximum(x.data, 0)

    def backward(g):
        return (g * (x.data > 0),)

    return make_output("relu", out, (x,), backward)


def softmax(x):
    """Softmax over the last axis."""
    _check_finite("softmax", x)
    shape = x.shape
    y = kernels.softmax_forward(x.data.reshape(-1, shape[-1])).reshape(shape)

    def backward(g):
        return (kernels.softmax_backward(y.reshape(-1, shape[-1]), g.reshape(-1, shape[-1])).reshape(shape),)

    return make_output("softmax", y, (x,), backward)


def layer_norm(x, gamma, beta, eps=LAYER_NORM_EPS):
    """Normalize each row over the last axis, then apply scale ``gamma`` and shift ``beta``."""
    _check_finite("layer_norm", x, gamma, beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: scale {gamma.shape} / shift {beta.shape} must be ({d},) for input {x.shape}")
    shape = x.shape
    y, xhat, rstd = kernels.layer_norm_forward(x.data.reshape(-1, d), gamma.data, beta.data, eps)

    def backward(g):
        dx, dgamma, dbeta = kernels.layer_norm_backward(g.reshape(-1, d), xhat, rstd, gamma.data)
        return dx.reshape(shape), dgamma, dbeta

    return make_output("layer_norm", y.reshape(shape), (x, gamma, beta), backward, eps=eps)


def embedding(ids, table):
    """Gather rows of ``table`` (V x d) for integer array ``ids``."""
    ids = np.asarray(ids)
    _check_finite("embedding", table)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError(f"embedding: ids must be integers, got {ids.dtype}")
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-d, got {table.shape}")
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise ShapeError(f"embedding: id out of range [0, {V}) (min {ids.min()}, max {ids.max()})")
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return make_output("embedding", out, (table,), backward, n_ids=ids.size)


def concat(tensors):
    """Concatenate along the last axis."""
    tensors = list(tensors)
    _check_finite("concat", *tensors)
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError(f"concat: leading dims differ, {tensors[0].shape} vs {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=-1)
    bounds = np.cumsum([0] + [t.shape[-1] for t in tensors])

    def backward(g):
        return tuple(
            g[..., bounds[i]:bounds[i + 1]] if t.requires_grad else None for i, t in enumerate(tensors)
        )

    return make_output("concat", out, tensors, backward)


def slice_(x, axis, start, stop):
    """``x[..., start:stop, ...]`` along ``axis``."""
    _check_finite("slice", x)
    axis = axis % x.ndim
    n = x.shape[axis]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"slice: range [{start}, {stop}) invalid for axis {axis} of size {n}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = x.data[index]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return make_output("slice", out, (x,), backward, axis=axis)


def transpose_last(x):
    """Swap the last two axes."""
    out = np.swapaxes(x.data, -1, -2)

    def backward(g):
        return (np.swapaxes(g, -1, -2),)

    return make_output("transpose", out, (x,), backward)


def reshape(x, shape):
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None

    def backward(g):
        return (g.reshape(x.shape),)

    return make_output("reshape", out, (x,), backward)


def sum_(x):
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return make_output("sum", out, (x,), backward)


def dropout(x, p, rng):
    """Inverted dropout; identity when ``p == 0``."""
    if p <= 0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    out = x.data * keep

    def backward(g):
        return (g * keep,)

    return make_output("dropout", out, (x,), backward, p=p)


def cross_entropy(logits, targets, ignore_index=IGNORE_INDEX):
    """Mean negative log-softmax over positions whose target is not ``ignore_index``.

    When every position is ignored the loss is 0 and ``loss.empty_batch`` is True.
    """
    _check_finite("cross_entropy", logits)
    targets = np.asarray(targets).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != targets.size:
        raise ShapeError(f"cross_entropy: logits {logits.shape} do not match {targets.size} targets")
    V = logits.shape[1]
    valid = targets != ignore_index
    bad = valid & ((targets < 0) | (targets >= V))
    if bad.any():
        raise ValueError(f"cross_entropy: target {targets[bad][0]} out of range [0, {V})")
    n = int(valid.sum())
    dtype = logits.dtype
    if n == 0:
        out = make_output("cross_entropy", np.zeros((), dtype=dtype), (logits,),
                          lambda g: (np.zeros_like(logits.data),), n_valid=0)
        out.empty_batch = True
        return out
    rows = np.nonzero(valid)[0]
    z = logits.data[rows]
    z = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(n), targets[rows]]
    loss = np.asarray((logsumexp - picked).sum() / n, dtype=dtype)

    def backward(g):
        p = np.exp(z - logsumexp[:, None])
        p[np.arange(n), targets[rows]] -= 1
        gl = np.zeros_like(logits.data)
        gl[rows] = p * (g / n)
        return (gl,)

    return make_output("cross_entropy", loss, (logits,), backward, n_valid=n)


def l1_norm(c):
    """Sum of absolute values; the subgradient at exactly 0 is 0."""
    _check_finite("l1_norm", c)
    out = np.asarray(np.abs(c.data).sum(), dtype=c.dtype)

    def backward(g):
        return (np.sign(c.data) * g,)

    return make_output("l1_norm", out, (c,), backward)


def primitive_forward(kind, inputs, **attrs):
    """Dispatch a primitive by name (used by generic checks and tooling)."""
    table = {
        "matmul": matmul,
        "add": add,
        "mul": mul,
        "scale": scale,
        "relu": relu,
        "softmax": softmax,
        "layer_norm": layer_norm,
        "concat": lambda *ts: concat(ts),
        "slice": slice_,
        "transpose": transpose_last,
        "sum": sum_,
        "l1_norm": l1_norm,
    }
    if kind == "embedding":
        ids, table_t = inputs
        return embedding(ids, table_t)
    if kind not in table:
        raise ValueError(f"unknown primitive {kind!r}")
    return table[kind](*inputs, **attrs)
