"""BERT-style encoder with slimming coefficients on heads and FFN neurons.

Layer layout is post-LN as in the original BERT::

    x = LN(x + W_O . concat_i(c_h[i] * m_h[i] * Attn_i(x)))
    x = LN(x + (c_f * m_f * relu(x W1 + b1)) W2 + b2)

Per-head projections are stored as separate ``d_model x d_head`` matrices
so that structural pruning can drop them one by one. A model produced by
surgery uses the same code path with fewer heads / narrower FFN per layer
and no coefficients.
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .autodiff import (
    Tensor,
    add,
    concat,
    dropout,
    embedding,
    layer_norm,
    matmul,
    mul_const,
    relu,
    reshape,
    scale,
    slice_,
    softmax,
    transpose_last,
)
from .autodiff.tensor import ShapeError, get_default_dtype

INIT_STD = 0.02


@dataclass
class ModelConfig:
    num_layers: int = 2
    num_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    vocab_size: int = 64
    max_seq_len: int = 64
    dropout_prob: float = 0.0
    task_head: str = "mlm"
    num_classes: int = 2

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("num_layers", "num_heads", "d_model", "d_ff", "vocab_size", "max_seq_len", "num_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.num_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by num_heads={self.num_heads}")
        if self.task_head not in ("mlm", "classification"):
            raise ValueError(f"task_head must be 'mlm' or 'classification', got {self.task_head!r}")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ValueError("dropout_prob must be in [0, 1)")

    @property
    def d_head(self):
        return self.d_model // self.num_heads

    @property
    def output_dim(self):
        return self.vocab_size if self.task_head == "mlm" else self.num_classes

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LayerParams:
    wq: list
    wk: list
    wv: list
    wo: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln2_g: Tensor
    ln2_b: Tensor

    @property
    def num_heads(self):
        return len(self.wq)

    @property
    def d_ff(self):
        return self.w1.shape[1]

    def named(self, prefix):
        out = []
        for kind in ("wq", "wk", "wv"):
            for i, t in enumerate(getattr(self, kind)):
                out.append((f"{prefix}.{kind}.{i}", t))
        for name in ("wo", "ln1_g", "ln1_b", "w1", "b1", "w2", "b2", "ln2_g", "ln2_b"):
            out.append((f"{prefix}.{name}", getattr(self, name)))
        return out


@dataclass
class ModelParams:
    config: ModelConfig
    tok_emb: Tensor
    pos_emb: Tensor
    emb_ln_g: Tensor
    emb_ln_b: Tensor
    layers: list
    head_w: Tensor
    head_b: Tensor
    theta0: dict = field(default_factory=dict)

    def named_tensors(self):
        out = [
            ("tok_emb", self.tok_emb),
            ("pos_emb", self.pos_emb),
            ("emb_ln_g", self.emb_ln_g),
            ("emb_ln_b", self.emb_ln_b),
        ]
        for i, layer in enumerate(self.layers):
            out.extend(layer.named(f"layers.{i}"))
        out += [("head_w", self.head_w), ("head_b", self.head_b)]
        return out

    def tensors(self):
        return [t for _, t in self.named_tensors()]

    def state(self):
        """Name -> array copy of all live weights."""
        return {name: t.data.copy() for name, t in self.named_tensors()}

    def num_parameters(self):
        return sum(t.size for t in self.tensors())

    def requires_grad_(self, flag=True):
        for t in self.tensors():
            t.requires_grad = flag
        return self

    def copy(self):
        return copy.deepcopy(self)

    def head_counts(self):
        return [layer.num_heads for layer in self.layers]

    def ffn_widths(self):
        return [layer.d_ff for layer in self.layers]


def no_decay(name):
    """Biases, layer-norm parameters and embeddings' norm are exempt from weight decay."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf.startswith("b") or leaf.startswith("ln") or name.startswith("emb_ln") or name == "head_b"


def params_from_state(config, state, head_counts=None, ffn_widths=None, dtype=None):
    """Rebuild :class:`ModelParams` from a name -> array mapping."""
    dtype = dtype or get_default_dtype()
    L = config.num_layers
    head_counts = head_counts or [config.num_heads] * L
    layers = []
    T = lambda name: Tensor(state[name], dtype=dtype)  # noqa: E731
    for i in range(L):
        p = f"layers.{i}"
        h = head_counts[i]
        layers.append(
            LayerParams(
                wq=[T(f"{p}.wq.{j}") for j in range(h)],
                wk=[T(f"{p}.wk.{j}") for j in range(h)],
                wv=[T(f"{p}.wv.{j}") for j in range(h)],
                wo=T(f"{p}.wo"),
                ln1_g=T(f"{p}.ln1_g"),
                ln1_b=T(f"{p}.ln1_b"),
                w1=T(f"{p}.w1"),
                b1=T(f"{p}.b1"),
                w2=T(f"{p}.w2"),
                b2=T(f"{p}.b2"),
                ln2_g=T(f"{p}.ln2_g"),
                ln2_b=T(f"{p}.ln2_b"),
            )
        )
    params = ModelParams(
        config=config,
        tok_emb=T("tok_emb"),
        pos_emb=T("pos_emb"),
        emb_ln_g=T("emb_ln_g"),
        emb_ln_b=T("emb_ln_b"),
        layers=layers,
        head_w=T("head_w"),
        head_b=T("head_b"),
    )
    if ffn_widths is not None and params.ffn_widths() != list(ffn_widths):
        raise ShapeError(f"state FFN widths {params.ffn_widths()} do not match {list(ffn_widths)}")
    return params


@dataclass
class SlimCoefficients:
    """Per-layer head coefficients (n,) and FFN-neuron coefficients (d_ff,)."""

    head: list
    neuron: list

    @classmethod
    def ones(cls, config, dtype=None, requires_grad=True):
        dtype = dtype or get_default_dtype()
        L = config.num_layers
        return cls(
            [Tensor(np.ones(config.num_heads), requires_grad=requires_grad, dtype=dtype) for _ in range(L)],
            [Tensor(np.ones(config.d_ff), requires_grad=requires_grad, dtype=dtype) for _ in range(L)],
        )

    @classmethod
    def from_mask(cls, mask, dtype=None):
        """c = 1 on kept units and 0 on pruned ones (not tracked)."""
        dtype = dtype or get_default_dtype()
        return cls(
            [Tensor(row.astype(np.float64), dtype=dtype) for row in mask.heads],
            [Tensor(row.astype(np.float64), dtype=dtype) for row in mask.neurons],
        )

    def named_tensors(self):
        return [(f"coef.head.{i}", t) for i, t in enumerate(self.head)] + [
            (f"coef.neuron.{i}", t) for i, t in enumerate(self.neuron)
        ]

    def tensors(self):
        return self.head + self.neuron

    def head_matrix(self):
        return np.stack([t.data for t in self.head])

    def neuron_matrix(self):
        return np.stack([t.data for t in self.neuron])

    def vector(self):
        """The concatenation of every coefficient (head ones first)."""
        return np.concatenate([t.data.reshape(-1) for t in self.tensors()])

    def copy(self):
        return copy.deepcopy(self)


def _trunc_normal(rng, shape, std=INIT_STD):
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_model(config, seed):
    """Random parameters (truncated normal, std 0.02) and all-ones coefficients.

    The returned params carry ``theta0``, a frozen copy of the initial weights.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    dtype = get_default_dtype()
    d, dh, f = config.d_model, config.d_head, config.d_ff
    W = lambda *shape: Tensor(_trunc_normal(rng, shape), dtype=dtype)  # noqa: E731
    Z = lambda n: Tensor(np.zeros(n), dtype=dtype)  # noqa: E731
    O = lambda n: Tensor(np.ones(n), dtype=dtype)  # noqa: E731

    tok_emb = W(config.vocab_size, d)
    pos_emb = W(config.max_seq_len, d)
    layers = []
    for _ in range(config.num_layers):
        n = config.num_heads
        layers.append(
            LayerParams(
                wq=[W(d, dh) for _ in range(n)],
                wk=[W(d, dh) for _ in range(n)],
                wv=[W(d, dh) for _ in range(n)],
                wo=W(n * dh, d),
                ln1_g=O(d),
                ln1_b=Z(d),
                w1=W(d, f),
                b1=Z(f),
                w2=W(f, d),
                b2=Z(d),
                ln2_g=O(d),
                ln2_b=Z(d),
            )
        )
    params = ModelParams(
        config=config,
        tok_emb=tok_emb,
        pos_emb=pos_emb,
        emb_ln_g=O(d),
        emb_ln_b=Z(d),
        layers=layers,
        head_w=W(d, config.output_dim),
        head_b=Z(config.output_dim),
    )
    params.theta0 = params.state()
    return params, SlimCoefficients.ones(config, dtype=dtype)


def attention_head(x, layer, i, d_head):
    """Scaled dot-product attention for head ``i`` -> (B, S, d_head)."""
    q = matmul(x, layer.wq[i])
    k = matmul(x, layer.wk[i])
    v = matmul(x, layer.wv[i])
    scores = mul_const(matmul(q, transpose_last(k)), 1.0 / math.sqrt(d_head))
    return matmul(softmax(scores), v)


def multi_head_attention(x, layer, head_coeffs=None, head_mask=None, d_head=None, rng=None, dropout_prob=0.0):
    """Attention sub-layer including residual connection and layer norm."""
    d_head = d_head or layer.wq[0].shape[1]
    heads = []
    for i in range(layer.num_heads):
        h = attention_head(x, layer, i, d_head)
        if head_coeffs is not None:
            h = scale(h, slice_(head_coeffs, 0, i, i + 1))
        if head_mask is not None and not head_mask[i]:
            h = scale(h, Tensor([0.0], dtype=x.dtype))
        heads.append(h)
    out = matmul(concat(heads), layer.wo)
    if rng is not None:
        out = dropout(out, dropout_prob, rng)
    return layer_norm(add(x, out), layer.ln1_g, layer.ln1_b)


def ffn(x, layer, neuron_coeffs=None, neuron_mask=None, rng=None, dropout_prob=0.0):
    """Feed-forward sub-layer including residual connection and layer norm."""
    h = relu(add(matmul(x, layer.w1), layer.b1))
    if neuron_coeffs is not None:
        h = scale(h, neuron_coeffs)
    if neuron_mask is not None and not np.all(neuron_mask):
        h = scale(h, Tensor(np.asarray(neuron_mask, dtype=np.float64), dtype=x.dtype))
    out = add(matmul(h, layer.w2), layer.b2)
    if rng is not None:
        out = dropout(out, dropout_prob, rng)
    return layer_norm(add(x, out), layer.ln2_g, layer.ln2_b)


def encode(params, token_ids, coeffs=None, masks=None, rng=None, num_layers=None):
    """Embeddings and the first ``num_layers`` transformer layers (all by default)."""
    config = params.config
    token_ids = np.asarray(token_ids)
    if token_ids.ndim != 2:
        raise ShapeError(f"token_ids must be (batch, seq), got {token_ids.shape}")
    S = token_ids.shape[1]
    if S > config.max_seq_len:
        raise ShapeError(f"sequence length {S} exceeds max_seq_len {config.max_seq_len}")
    if token_ids.size and (token_ids.min() < 0 or token_ids.max() >= config.vocab_size):
        raise ValueError(f"token id out of vocabulary range [0, {config.vocab_size})")
    p = config.dropout_prob if rng is not None else 0.0
    x = add(embedding(token_ids, params.tok_emb), slice_(params.pos_emb, 0, 0, S))
    x = layer_norm(x, params.emb_ln_g, params.emb_ln_b)
    if rng is not None:
        x = dropout(x, p, rng)
    for li, layer in enumerate(params.layers[:num_layers]):
        hc = coeffs.head[li] if coeffs is not None else None
        nc = coeffs.neuron[li] if coeffs is not None else None
        hm = masks.heads[li] if masks is not None else None
        nm = masks.neurons[li] if masks is not None else None
        x = multi_head_attention(x, layer, hc, hm, config.d_head, rng, p)
        x = ffn(x, layer, nc, nm, rng, p)
    return x


def forward(params, coeffs, masks, token_ids, rng=None):
    """Logits: (B, S, V) for the MLM head, (B, num_classes) for classification.

    ``coeffs`` / ``masks`` may be None (plain transformer). Dropout is only
    active when an ``rng`` is given and ``dropout_prob > 0``.
    """
    x = encode(params, token_ids, coeffs, masks, rng)
    B, S = np.asarray(token_ids).shape
    if params.config.task_head == "mlm":
        return add(matmul(x, params.head_w), params.head_b)
    pooled = reshape(slice_(x, 1, 0, 1), (B, params.config.d_model))
    return add(matmul(pooled, params.head_w), params.head_b)


def head_branch(params, token_ids, layer_index, head_index, coeffs=None, masks=None):
    """Output of one head (before coefficient scaling) at a given layer, for inspection."""
    x = encode(params, token_ids, coeffs, masks, num_layers=layer_index)
    return attention_head(x, params.layers[layer_index], head_index, params.config.d_head)
