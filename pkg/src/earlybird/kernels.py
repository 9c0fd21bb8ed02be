"""Kernel backend selection.

The compiled Cython module is used when it imports; otherwise the numpy
fallback is used. ``EARLYBIRD_PURE=1`` forces the fallback. All callers
pass 2-D arrays whose last axis is the reduction axis.
"""
import os

import numpy as np

from . import _fallback

_compiled = None
if not os.environ.get("EARLYBIRD_PURE"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        _compiled = None

BACKEND = "cython" if _compiled is not None else "numpy"
_impl = _compiled if _compiled is not None else _fallback


def use_backend(name):
    """Switch backend at runtime ("cython" or "numpy"); returns the previous name."""
    global BACKEND, _impl
    prev = BACKEND
    if name == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not available")
        _impl = _compiled
    elif name == "numpy":
        _impl = _fallback
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    BACKEND = name
    return prev


def compiled_available():
    return _compiled is not None


_NATIVE = (np.float32, np.float64)


def _c(a):
    return np.ascontiguousarray(a)


def _for(*arrays):
    # compiled kernels only cover float32/float64 with matching dtypes
    dt = arrays[0].dtype
    if dt.type in _NATIVE and all(a.dtype == dt for a in arrays):
        return _impl
    return _fallback


def softmax_forward(x):
    return _for(x).softmax_forward(_c(x))


def softmax_backward(y, g):
    return _for(y, g).softmax_backward(_c(y), _c(g))


def layer_norm_forward(x, gamma, beta, eps):
    return _for(x, gamma, beta).layer_norm_forward(_c(x), _c(gamma), _c(beta), float(eps))


def layer_norm_backward(g, xhat, rstd, gamma):
    return _for(g, xhat, rstd, gamma).layer_norm_backward(_c(g), _c(xhat), _c(rstd), _c(gamma))


def pairwise_hamming(bits):
    return _impl.pairwise_hamming(_c(np.asarray(bits, dtype=np.uint8)))
