"""Forward-pass FLOP accounting.

Costs per primitive (per output element unless stated):

=============  =========================================
matmul         2 * m * k * n (one multiply + one add)
add, mul,      1
scale,
mul_const,
relu
softmax        5 (max, subtract, exp, sum, divide)
layer_norm     7 (mean, centre, square, variance,
               normalize, scale, shift)
embedding,     0 (data movement)
slice, concat,
reshape,
transpose
=============  =========================================

:func:`count_flops` is the closed form over architecture dimensions for a
single sequence; :func:`graph_flops` walks a recorded forward graph and
sums the same per-primitive costs. Coefficient and mask multiplies are
excluded from the closed form because the plain and pruned models have
none.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import no_grad, record_graph
from .model import forward

ELEMENTWISE_COST = {
    "add": 1,
    "mul": 1,
    "scale": 1,
    "mul_const": 1,
    "relu": 1,
    "softmax": 5,
    "layer_norm": 7,
    "dropout": 1,
}
FREE = {"embedding", "slice", "concat", "reshape", "transpose"}

TRAIN_STEP_MULTIPLIER = 3  # forward + backward ~ 3x forward


@dataclass
class FlopCount:
    terms: dict = field(default_factory=dict)

    @property
    def total(self):
        return sum(self.terms.values())

    def __int__(self):
        return self.total


def arch_dims(arch):
    """(config, heads kept per layer, FFN width per layer) for a config or pruned architecture."""
    if hasattr(arch, "heads_kept"):
        return arch.config, list(arch.heads_kept), list(arch.d_ff_kept)
    return arch, [arch.num_heads] * arch.num_layers, [arch.d_ff] * arch.num_layers


def count_flops(arch, seq_len):
    """Closed-form forward FLOPs for one sequence of length ``seq_len``."""
    config, heads, widths = arch_dims(arch)
    S, d, dh = seq_len, config.d_model, config.d_head
    terms = {
        "embedding": S * d + 7 * S * d,
        "attention_proj": 0,
        "attention_core": 0,
        "ffn": 0,
        "residual_norm": 0,
    }
    for h, f in zip(heads, widths):
        terms["attention_proj"] += h * 3 * (2 * S * d * dh) + 2 * S * (h * dh) * d
        terms["attention_core"] += h * (2 * S * dh * S + S * S + 5 * S * S + 2 * S * S * dh)
        terms["ffn"] += 2 * S * d * f + S * f + S * f + 2 * S * f * d
        terms["residual_norm"] += 2 * (S * d + 7 * S * d) + S * d
    if config.task_head == "mlm":
        V = config.vocab_size
        terms["head"] = 2 * S * d * V + S * V
    else:
        C = config.num_classes
        terms["head"] = 2 * d * C + C
    return FlopCount(terms)


def node_cost(node):
    kind = node.kind
    if kind in FREE:
        return 0
    if kind == "matmul":
        a = node.inputs[0]
        return 2 * int(node.output.size) * int(a.shape[-1])
    if kind in ELEMENTWISE_COST:
        return ELEMENTWISE_COST[kind] * int(node.output.size)
    raise ValueError(f"no cost rule for primitive {kind!r}")


def graph_flops(graph):
    """Sum primitive costs over every node of a recorded graph."""
    return sum(node_cost(n) for n in graph.nodes)


def walk_forward_flops(params, seq_len, coeffs=None, masks=None):
    """Run one forward pass on a single sequence and count its recorded ops."""
    ids = np.zeros((1, seq_len), dtype=np.int64)
    with no_grad(), record_graph() as graph:
        forward(params, coeffs, masks, ids)
    return graph_flops(graph)


def train_step_flops(arch, seq_len, batch_size):
    return TRAIN_STEP_MULTIPLIER * batch_size * count_flops(arch, seq_len).total
