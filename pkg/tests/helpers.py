"""Shared scenarios for the unit and acceptance tests."""
import numpy as np

from earlybird.autodiff import (
    Tensor,
    add,
    concat,
    cross_entropy,
    dropout,
    embedding,
    l1_norm,
    layer_norm,
    matmul,
    mul,
    mul_const,
    relu,
    reshape,
    scale,
    slice_,
    softmax,
    sum_,
    transpose_last,
)
from earlybird.model import ModelConfig, SlimCoefficients, forward, init_model


def weighted_sum(y, rng):
    """Scalar probe with random weights, so no gradient is trivially symmetric."""
    w = Tensor(rng.normal(size=y.shape))
    return sum_(mul(y, w))


def primitive_cases(seed):
    """name -> (fn, point) for every differentiable primitive, in float64."""
    rng = np.random.default_rng(seed)
    W = lambda *shape: Tensor(rng.normal(size=shape))  # noqa: E731
    ids = rng.integers(0, 6, size=(2, 3))
    targets = rng.integers(0, 5, size=4)
    targets[1] = -100
    cases = {
        "matmul": (lambda a, b: weighted_sum(matmul(a, b), np.random.default_rng(1)), [W(2, 3, 4), W(4, 5)]),
        "matmul_batched": (lambda a, b: weighted_sum(matmul(a, b), np.random.default_rng(1)), [W(2, 3, 4), W(2, 4, 3)]),
        "add": (lambda a, b: weighted_sum(add(a, b), np.random.default_rng(2)), [W(3, 4), W(4)]),
        "mul": (lambda a, b: weighted_sum(mul(a, b), np.random.default_rng(3)), [W(3, 4), W(1, 4)]),
        "scale": (lambda x, c: weighted_sum(scale(x, c), np.random.default_rng(4)), [W(2, 3, 5), W(5)]),
        "mul_const": (lambda x: weighted_sum(mul_const(x, 0.37), np.random.default_rng(5)), [W(3, 3)]),
        "relu": (lambda x: weighted_sum(relu(x), np.random.default_rng(6)), [W(4, 5)]),
        "softmax": (lambda x: weighted_sum(softmax(x), np.random.default_rng(7)), [W(3, 6)]),
        "layer_norm": (lambda x, g, b: weighted_sum(layer_norm(x, g, b), np.random.default_rng(8)),
                       [W(3, 6), W(6), W(6)]),
        "embedding": (lambda t: weighted_sum(embedding(ids, t), np.random.default_rng(9)), [W(6, 4)]),
        "concat": (lambda a, b: weighted_sum(concat([a, b]), np.random.default_rng(10)), [W(2, 3), W(2, 2)]),
        "slice": (lambda x: weighted_sum(slice_(x, 1, 1, 3), np.random.default_rng(11)), [W(3, 4)]),
        "transpose": (lambda x: weighted_sum(transpose_last(x), np.random.default_rng(12)), [W(2, 3, 4)]),
        "reshape": (lambda x: weighted_sum(reshape(x, (6, 2)), np.random.default_rng(13)), [W(3, 4)]),
        "sum": (lambda x: mul_const(sum_(x), 1.5), [W(3, 4)]),
        "cross_entropy": (lambda z: cross_entropy(z, targets), [W(4, 5)]),
        "l1_norm": (lambda c: l1_norm(c), [W(7)]),
        "dropout": (lambda x: weighted_sum(dropout(x, 0.3, np.random.default_rng(14)), np.random.default_rng(15)),
                    [W(4, 4)]),
    }
    return cases


GRAD_MODEL = ModelConfig(num_layers=1, num_heads=2, d_model=8, d_ff=12, vocab_size=7, max_seq_len=8)


def model_loss_case(seed, config=GRAD_MODEL):
    """Full-model MLM loss with every weight and coefficient as an input.

    Weights are redrawn at std 0.5 and coefficients around 1 so that the
    attention pattern and the coefficient gradients are far from trivial.
    Call inside ``precision(np.float64)``.
    """
    rng = np.random.default_rng(seed)
    params, _ = init_model(config, seed)
    for t in params.tensors():
        t.data = rng.normal(0.0, 0.5, size=t.shape)
    coeffs = SlimCoefficients.ones(config)
    for t in coeffs.tensors():
        t.data = rng.normal(1.0, 0.3, size=t.shape)
    ids = rng.integers(0, config.vocab_size, size=(2, 5))
    tg = rng.integers(0, config.vocab_size, size=10)
    named = params.named_tensors() + coeffs.named_tensors()
    names = [n for n, _ in named]
    point = [t for _, t in named]
    n_params = len(params.tensors())

    def fn(*tensors):
        for t, new in zip(point, tensors):
            assert t is new
        logits = forward(params, coeffs, None, ids)
        return cross_entropy(reshape(logits, (10, config.vocab_size)), tg)

    return fn, point, names, n_params


TOY = ModelConfig(num_layers=4, num_heads=4, d_model=128, d_ff=512, vocab_size=40, max_seq_len=16)


def enumerate_ops(S, d, dh, heads, widths, out_rows, out_dim):
    """Hand-listed (kind, count) pairs for one forward pass; an oracle independent of the library."""
    mm = lambda m, k, n: 2 * m * k * n  # noqa: E731
    ops = [("add", S * d), ("layer_norm", 7 * S * d)]
    for h, f in zip(heads, widths):
        for _ in range(h):
            ops += [("matmul", mm(S, d, dh))] * 3
            ops += [("matmul", mm(S, dh, S)), ("mul_const", S * S), ("softmax", 5 * S * S), ("matmul", mm(S, S, dh))]
        ops += [("matmul", mm(S, h * dh, d)), ("add", S * d), ("layer_norm", 7 * S * d)]
        ops += [("matmul", mm(S, d, f)), ("add", S * f), ("relu", S * f), ("matmul", mm(S, f, d)), ("add", S * d)]
        ops += [("add", S * d), ("layer_norm", 7 * S * d)]
    ops += [("matmul", mm(out_rows, d, out_dim)), ("add", out_rows * out_dim)]
    return ops


def flops_oracle(config, seq_len, heads=None, widths=None):
    heads = heads or [config.num_heads] * config.num_layers
    widths = widths or [config.d_ff] * config.num_layers
    rows, out = (seq_len, config.vocab_size) if config.task_head == "mlm" else (1, config.num_classes)
    return sum(c for _, c in enumerate_ops(seq_len, config.d_model, config.d_head, heads, widths, rows, out))
