"""Searching and ticket-drawing stages.

Model weights and slimming coefficients are trained jointly against
``task_loss + lambda * ||c||_1``. Every ``snapshot_interval`` steps a
candidate ticket is drawn from the current coefficients; the search exits
once the last ``exit_window`` candidates are pairwise closer than
``exit_epsilon`` in normalized Hamming distance.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .autodiff import add, backward, concat, l1_norm, mul_const
from .autodiff.tensor import NonFiniteError
from .masks import TicketMask
from .model import SlimCoefficients, no_decay
from .optim import OptimizerState, optimizer_step

log = logging.getLogger(__name__)


@dataclass
class SearchConfig:
    lambda_: float = 1e-4
    objective: str = "downstream"
    max_search_steps: int = 100
    snapshot_interval: int = 5
    heads_pruned_per_layer: int = 1
    neuron_prune_ratio: float = 0.4
    neuron_scope: str = "global"
    exit_window: int = 5
    exit_epsilon: float = 0.05
    observe_full_budget: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self, num_heads=None):
        if self.lambda_ < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lambda_}")
        if self.objective not in ("downstream", "mlm"):
            raise ValueError(f"objective must be 'downstream' or 'mlm', got {self.objective!r}")
        if self.heads_pruned_per_layer < 0 or (num_heads is not None and self.heads_pruned_per_layer >= num_heads):
            raise ValueError(f"heads_pruned_per_layer must be in [0, n), got {self.heads_pruned_per_layer}")
        if not 0.0 <= self.neuron_prune_ratio < 1.0:
            raise ValueError(f"neuron_prune_ratio must be in [0, 1), got {self.neuron_prune_ratio}")
        if self.neuron_scope not in ("global", "layerwise"):
            raise ValueError(f"neuron_scope must be 'global' or 'layerwise', got {self.neuron_scope!r}")
        if not 0.0 <= self.exit_epsilon <= 1.0:
            raise ValueError("exit_epsilon must be in [0, 1]")
        if self.exit_window < 2:
            raise ValueError("exit_window must be >= 2")
        if self.max_search_steps < 1 or self.snapshot_interval < 1:
            raise ValueError("max_search_steps and snapshot_interval must be >= 1")


class SearchDiverged(NonFiniteError):
    pass


def regularized_loss(task_loss, coeffs, lam):
    """``task_loss + lam * ||c||_1``; returns ``(total, l1_value)``."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    reg = l1_norm(concat(coeffs.tensors()))
    if lam == 0:
        return task_loss, float(reg.data)
    return add(task_loss, mul_const(reg, lam)), float(reg.data)


def search_optimizer(params, coeffs, weight_decay=0.01):
    """AdamW state over weights then coefficients; coefficients never decay."""
    names = [n for n, _ in params.named_tensors()]
    flags = [not no_decay(n) for n in names] + [False] * len(coeffs.tensors())
    tensors = params.tensors() + coeffs.tensors()
    return tensors, OptimizerState.for_params(tensors, flags, weight_decay=weight_decay)


def search_step(params, coeffs, batch, config, opt_state, lr, loss_fn, tensors=None):
    """One joint update of weights and coefficients. Returns ``(task_loss, l1)``."""
    tensors = tensors if tensors is not None else params.tensors() + coeffs.tensors()
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    task = loss_fn(params, coeffs, batch)
    total, reg = regularized_loss(task, coeffs, config.lambda_)
    if not np.isfinite(total.data):
        vec = coeffs.vector()
        raise SearchDiverged(
            f"non-finite search loss {float(total.data)}; coefficient range "
            f"[{np.nanmin(vec):.4g}, {np.nanmax(vec):.4g}], max |c| {np.nanmax(np.abs(vec)):.4g}"
        )
    backward(total)
    optimizer_step(tensors, [t.grad for t in tensors], opt_state, lr)
    return float(task.data), reg


def _as_matrices(coeffs):
    if isinstance(coeffs, SlimCoefficients):
        return coeffs.head_matrix(), coeffs.neuron_matrix()
    head, neuron = coeffs
    return np.asarray(head), np.asarray(neuron)


def _round_half_up(x):
    return int(np.floor(x + 0.5))


def prune_heads(head_abs, k):
    """Per layer, drop the k smallest |c|; ties go to the lower index."""
    L, n = head_abs.shape
    if not 0 <= k < n:
        raise ValueError(f"cannot prune {k} of {n} heads per layer")
    keep = np.ones((L, n), dtype=bool)
    for layer in range(L):
        order = np.lexsort((np.arange(n), head_abs[layer]))
        keep[layer, order[:k]] = False
    return keep


def kept_neuron_count(L, d_ff, rho, scope):
    if scope == "global":
        return _round_half_up((1.0 - rho) * L * d_ff)
    return L * max(1, _round_half_up((1.0 - rho) * d_ff))


def prune_neurons(neuron_abs, rho, scope):
    """Drop the smallest-|c| fraction ``rho`` of FFN neurons, globally or per layer.

    Ordering is ascending (|c|, layer, unit). Under global scope a candidate
    that would leave its layer empty is skipped (its layer's largest neuron
    survives) and the next candidate is pruned instead.
    """
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"neuron prune ratio must be in [0, 1), got {rho}")
    L, f = neuron_abs.shape
    keep = np.ones((L, f), dtype=bool)
    if scope == "layerwise":
        n_prune = f - max(1, _round_half_up((1.0 - rho) * f))
        for layer in range(L):
            order = np.lexsort((np.arange(f), neuron_abs[layer]))
            keep[layer, order[:n_prune]] = False
        return keep
    if scope != "global":
        raise ValueError(f"unknown neuron scope {scope!r}")
    n_prune = L * f - _round_half_up((1.0 - rho) * L * f)
    layer_idx, unit_idx = np.divmod(np.arange(L * f), f)
    order = np.lexsort((unit_idx, layer_idx, neuron_abs.reshape(-1)))
    remaining = np.full(L, f)
    pruned = 0
    for flat in order:
        if pruned == n_prune:
            break
        layer, unit = layer_idx[flat], unit_idx[flat]
        if remaining[layer] == 1:
            log.info("global neuron pruning: force-keeping last neuron %d of layer %d", unit, layer)
            continue
        keep[layer, unit] = False
        remaining[layer] -= 1
        pruned += 1
    return keep


def draw_ticket(coeffs, k, rho, neuron_scope="global", step=None):
    """Magnitude-based ticket from learned coefficients (True = keep)."""
    head, neuron = _as_matrices(coeffs)
    return TicketMask(prune_heads(np.abs(head), k), prune_neurons(np.abs(neuron), rho, neuron_scope), step=step)


def mask_distance(m1, m2, kind="all"):
    """Normalized Hamming distance between two masks of identical layout."""
    if m1.heads.shape != m2.heads.shape or m1.neurons.shape != m2.neurons.shape:
        raise ValueError(
            f"mask dimensions differ: heads {m1.heads.shape} vs {m2.heads.shape}, "
            f"neurons {m1.neurons.shape} vs {m2.neurons.shape}"
        )
    a, b = _kind_bits(m1, kind), _kind_bits(m2, kind)
    return float(np.count_nonzero(a != b)) / a.size


def _kind_bits(mask, kind):
    if kind == "all":
        return mask.bits()
    if kind == "head":
        return mask.heads.reshape(-1).astype(np.uint8)
    if kind == "neuron":
        return mask.neurons.reshape(-1).astype(np.uint8)
    raise ValueError(f"unknown mask kind {kind!r}")


@dataclass
class MaskDistanceTrace:
    snapshots: list = field(default_factory=list)

    def append(self, mask):
        if self.snapshots:
            mask_distance(self.snapshots[-1], mask)  # layout check
        self.snapshots.append(mask)

    def __len__(self):
        return len(self.snapshots)

    @property
    def steps(self):
        return [m.step for m in self.snapshots]

    def matrix(self, kind="all", last=None):
        """Pairwise normalized distances (symmetric, zero diagonal)."""
        snaps = self.snapshots[-last:] if last else self.snapshots
        if not snaps:
            return np.zeros((0, 0))
        bits = np.stack([_kind_bits(m, kind) for m in snaps])
        return kernels.pairwise_hamming(bits) / bits.shape[1]


def early_stop_check(trace, w, eps):
    """True iff the last ``w`` snapshots are pairwise closer than ``eps``."""
    if len(trace) < w:
        return False
    return bool(trace.matrix(last=w).max() < eps)


@dataclass
class SearchResult:
    mask: TicketMask
    trace: MaskDistanceTrace
    steps_used: int
    coeffs: SlimCoefficients
    task_losses: list
    l1_values: list
    step_times_ns: list
    exit_step: int | None = None
    late_divergence: float = 0.0
    exit_coeffs: SlimCoefficients | None = None

    @property
    def stopped_early(self):
        return self.exit_step is not None


def run_search(params, coeffs, batch_fn, loss_fn, config, lr_fn, weight_decay=0.01):
    """Searching stage with mask snapshots and early exit.

    ``batch_fn(step)`` returns the batch for a step (built outside the timed
    region), ``loss_fn(params, coeffs, batch)`` the task loss, and
    ``lr_fn(step)`` the learning rate. ``params`` is copied: trained weights
    are discarded, only coefficients, the ticket and the trace come back.
    """
    config.validate(params.config.num_heads)
    params = params.copy()
    coeffs = coeffs.copy()
    tensors, opt = search_optimizer(params, coeffs, weight_decay)
    trace = MaskDistanceTrace()
    result = SearchResult(None, trace, 0, coeffs, [], [], [])
    k, rho, scope = config.heads_pruned_per_layer, config.neuron_prune_ratio, config.neuron_scope

    for step in range(config.max_search_steps):
        batch = batch_fn(step)
        t0 = time.perf_counter_ns()
        task, reg = search_step(params, coeffs, batch, config, opt, lr_fn(step), loss_fn, tensors)
        t1 = time.perf_counter_ns()
        if t1 < t0:
            raise RuntimeError("monotonic clock went backwards")
        if result.exit_step is None:
            result.step_times_ns.append(max(t1 - t0, 1))
        result.task_losses.append(task)
        result.l1_values.append(reg)
        if (step + 1) % config.snapshot_interval:
            continue
        trace.append(draw_ticket(coeffs, k, rho, scope, step=step + 1))
        if result.exit_step is not None:
            d = mask_distance(result.mask, trace.snapshots[-1])
            if d > result.late_divergence:
                result.late_divergence = d
                log.info("mask diverged from exit ticket by %.4f at step %d", d, step + 1)
            continue
        if early_stop_check(trace, config.exit_window, config.exit_epsilon):
            result.exit_step = step + 1
            result.mask = trace.snapshots[-1]
            result.exit_coeffs = coeffs.copy()
            if not config.observe_full_budget:
                break

    if result.exit_step is None:
        result.steps_used = config.max_search_steps
        result.mask = draw_ticket(coeffs, k, rho, scope, step=config.max_search_steps)
    else:
        result.steps_used = result.exit_step
        result.coeffs = result.exit_coeffs
    return result
