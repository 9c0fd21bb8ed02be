"""Dense tensors and the tape that records operations for reverse mode.

Operations are appended to a module-level :class:`GradGraph` in execution
order, so the tape is topologically sorted by construction. ``backward``
walks it once in reverse and clears it.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class ShapeError(ValueError):
    """Input shapes violate a primitive's contract."""


class NonFiniteError(FloatingPointError):
    """NaN or Inf encountered while strict checks are enabled."""


class _State:
    def __init__(self):
        self.dtype = np.float32
        self.grad_enabled = True
        self.record_all = False
        self.strict = False
        self.graph = GradGraph()


@dataclass
class Node:
    kind: str
    inputs: tuple
    output: "Tensor"
    backward: Callable | None
    attrs: dict = field(default_factory=dict)


class GradGraph:
    """Ordered record of executed primitives."""

    def __init__(self):
        self.nodes: list[Node] = []

    def record(self, node):
        self.nodes.append(node)

    def clear(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)


_state = _State()


def get_default_dtype():
    return _state.dtype


def set_default_dtype(dtype):
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    _state.dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the default floating dtype (float32 or float64)."""
    prev = _state.dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def strict_checks(enabled=True):
    prev = _state.strict
    _state.strict = enabled
    try:
        yield
    finally:
        _state.strict = prev


@contextlib.contextmanager
def record_graph():
    """Record every primitive (tracked or not) into a fresh graph and yield it.

    Used for op-counting; the previous graph is restored on exit.
    """
    prev_graph, prev_flag = _state.graph, _state.record_all
    graph = GradGraph()
    _state.graph, _state.record_all = graph, True
    try:
        yield graph
    finally:
        _state.graph, _state.record_all = prev_graph, prev_flag


def current_graph():
    return _state.graph


def strict_enabled():
    return _state.strict


class Tensor:
    """n-d float array that can take part in the gradient graph."""

    __array_priority__ = 100
    empty_batch = False

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        dtype = dtype or _state.dtype
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.is_leaf = True

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

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    def __add__(self, other):
        from .ops import add
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __mul__(self, other):
        from .ops import mul
        return mul(self, _lift(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        from .ops import mul_const
        return mul_const(self, -1.0)

    def __sub__(self, other):
        return self + (-_lift(other, self))

    def __matmul__(self, other):
        from .ops import matmul
        return matmul(self, other)

    def backward(self):
        backward(self)


def _lift(x, like):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=like.dtype)


def make_output(kind, data, inputs, backward_fn, **attrs):
    """Wrap a primitive's output and record it when gradients or counting are on."""
    tracked = _state.grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = tracked
    out.grad = None
    out.is_leaf = False
    if tracked or _state.record_all:
        _state.graph.record(Node(kind, tuple(inputs), out, backward_fn if tracked else None, attrs))
    return out


def backward(loss):
    """Populate ``.grad`` on every tracked leaf reachable from ``loss``.

    Visits each recorded node exactly once (reverse tape order) and clears
    the graph afterwards.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    graph = _state.graph
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    try:
        for node in reversed(graph.nodes):
            g = grads.pop(id(node.output), None)
            if g is None or node.backward is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if t.is_leaf:
                    leaves[key] = t
        if loss.is_leaf and loss.requires_grad:
            leaves[id(loss)] = loss
        for key, t in leaves.items():
            t.grad = np.asarray(grads[key], dtype=t.data.dtype).reshape(t.shape)
    finally:
        graph.clear()
