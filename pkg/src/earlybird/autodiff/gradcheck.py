"""Central finite-difference oracle for reverse-mode gradients."""
from __future__ import annotations

import numpy as np

from .tensor import backward, no_grad

ABS_FLOOR = 1e-8
# x87 extended precision where the platform has it; float64 otherwise
EXTENDED = np.longdouble if np.finfo(np.longdouble).eps < np.finfo(np.float64).eps else np.float64


class NonDeterministicError(RuntimeError):
    pass


def relative_error(analytic, numeric, floor=ABS_FLOOR):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numerical_gradient(fn, point, index, eps):
    """Central differences of ``fn(*point)`` w.r.t. ``point[index]``, in that tensor's dtype."""
    t = point[index]
    flat = t.data.reshape(-1)
    out = np.zeros(flat.size, dtype=t.data.dtype)
    two_eps = t.data.dtype.type(2 * eps)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + t.data.dtype.type(eps)
            fp = fn(*point).data
            flat[i] = orig - t.data.dtype.type(eps)
            fm = fn(*point).data
            flat[i] = orig
            out[i] = (fp - fm) / two_eps
    return out.reshape(t.shape)


def finite_difference_check(fn, point, eps=1e-5, skip_near_zero=True, oracle_dtype=EXTENDED, details=False):
    """Compare ``backward`` gradients of ``fn(*point)`` against central differences.

    ``point`` is a list of tensors, all treated as inputs. The analytic
    gradient is computed in the tensors' own precision; the difference
    quotients are evaluated after casting the point to ``oracle_dtype``
    (pass ``None`` to keep the native dtype), which keeps the oracle's own
    roundoff well below the tolerance being checked. Coordinates with
    ``|x| < eps`` are skipped when ``skip_near_zero`` is set, since
    piecewise-linear kinks sit at 0.

    Returns the worst elementwise relative error, or ``(worst, per_input)``
    with ``details=True``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    point = list(point)
    with no_grad():
        f1 = fn(*point).data.copy()
        f2 = fn(*point).data.copy()
    if not np.array_equal(f1, f2):
        raise NonDeterministicError(f"function is not deterministic: {f1} != {f2}")

    saved = [t.requires_grad for t in point]
    for t in point:
        t.requires_grad = True
        t.grad = None
    backward(fn(*point))
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in point]
    for t, flag in zip(point, saved):
        t.requires_grad = flag

    native = [t.data for t in point]
    if oracle_dtype is not None:
        for t in point:
            t.data = t.data.astype(oracle_dtype)
    worst = 0.0
    per_input = []
    try:
        for i, t in enumerate(point):
            numeric = numerical_gradient(fn, point, i, eps)
            err = relative_error(analytic[i], numeric)
            if skip_near_zero:
                err = np.where(np.abs(native[i]) < eps, 0.0, err)
            e = float(err.max()) if err.size else 0.0
            per_input.append(e)
            worst = max(worst, e)
    finally:
        for t, data in zip(point, native):
            t.data = data
    if details:
        return worst, per_input
    return worst
