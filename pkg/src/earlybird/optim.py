"""AdamW with decoupled weight decay, and the warmup/linear-decay schedule."""
from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import dataclass, field

import numpy as np

from .autodiff.tensor import NonFiniteError, strict_enabled


@dataclass
class TrainSchedule:
    total_steps: int | None = None
    epochs: float | None = None
    base_lr: float = 1e-3
    lr_scale: float = 1.0
    warmup_fraction: float = 0.1
    step_budget_fraction: float = 1.0
    batch_size: int = 16
    weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.step_budget_fraction <= 1.0:
            raise ValueError(f"step_budget_fraction must be in (0, 1], got {self.step_budget_fraction}")
        if self.lr_scale <= 0:
            raise ValueError("lr_scale must be positive")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def nominal_steps(self, steps_per_epoch=None):
        """Step count before the step-budget fraction is applied."""
        if self.total_steps is not None:
            return int(self.total_steps)
        if self.epochs is None or steps_per_epoch is None:
            raise ValueError("schedule needs total_steps, or epochs plus steps_per_epoch")
        return int(math.ceil(self.epochs * steps_per_epoch))

    def executed_steps(self, steps_per_epoch=None):
        # exact decimal product, so 0.8 * 1000 is 800 and not 799
        n = self.nominal_steps(steps_per_epoch)
        return max(1, math.floor(Fraction(str(self.step_budget_fraction)) * n))

    @property
    def peak_lr(self):
        return self.base_lr * self.lr_scale


def lr_at(step, schedule, total_steps=None):
    """Linear warmup to ``base_lr * lr_scale`` then linear decay to 0.

    ``total_steps`` is the number of steps actually executed (already scaled
    by the step-budget fraction); defaults to the schedule's own count.
    """
    total = total_steps if total_steps is not None else schedule.executed_steps()
    if not 0 <= step < total:
        raise ValueError(f"step {step} outside [0, {total})")
    peak = schedule.peak_lr
    warm = int(schedule.warmup_fraction * total)
    if step < warm:
        return peak * step / warm
    return peak * (total - step) / (total - warm)


@dataclass
class OptimizerState:
    m: list
    v: list
    decay: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def for_params(cls, tensors, decay_flags=None, **hyper):
        decay_flags = decay_flags if decay_flags is not None else [True] * len(tensors)
        return cls(
            m=[np.zeros_like(t.data) for t in tensors],
            v=[np.zeros_like(t.data) for t in tensors],
            decay=list(decay_flags),
            **hyper,
        )


def optimizer_step(tensors, grads, state, lr_t):
    """One AdamW update, in place on ``tensors[i].data``.

    Weight decay is decoupled: ``p -= lr_t * weight_decay * p`` before the
    adaptive step, and only where ``state.decay[i]`` is set. A ``None``
    gradient is treated as zero.
    """
    if lr_t < 0:
        raise ValueError("learning rate must be non-negative")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for i, p in enumerate(tensors):
        g = grads[i]
        if g is None:
            g = np.zeros_like(p.data)
        if strict_enabled() and not np.all(np.isfinite(g)):
            raise NonFiniteError(f"optimizer_step: non-finite gradient for parameter {i} {p.shape}")
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.decay[i] and state.weight_decay:
            p.data *= 1.0 - lr_t * state.weight_decay
        mhat = m / bc1
        vhat = v / bc2
        p.data -= (lr_t * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype)
    return state


@dataclass
class Optimizer:
    """Binds tensors to an :class:`OptimizerState`."""

    tensors: list
    state: OptimizerState = field(default=None)

    def step(self, lr_t):
        optimizer_step(self.tensors, [t.grad for t in self.tensors], self.state, lr_t)

    def zero_grad(self):
        for t in self.tensors:
            t.grad = None
