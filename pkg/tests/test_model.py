import numpy as np
import pytest

from earlybird.autodiff import ShapeError, Tensor, concat, layer_norm, matmul, no_grad, precision, scale, slice_
from earlybird.masks import TicketMask
from earlybird.model import (
    attention_head,
    ModelConfig,
    SlimCoefficients,
    encode,
    ffn,
    forward,
    head_branch,
    init_model,
    multi_head_attention,
    no_decay,
)
from earlybird.surgery import apply_ticket


def small(**kw):
    base = dict(num_layers=2, num_heads=4, d_model=16, d_ff=24, vocab_size=11, max_seq_len=8)
    base.update(kw)
    return ModelConfig(**base)


def ids(shape, vocab=11, seed=0):
    return np.random.default_rng(seed).integers(0, vocab, size=shape)


def test_init_is_deterministic():
    a, _ = init_model(small(), 3)
    b, _ = init_model(small(), 3)
    for (na, ta), (nb, tb) in zip(a.named_tensors(), b.named_tensors()):
        assert na == nb
        assert ta.data.tobytes() == tb.data.tobytes()


def test_init_coefficients_are_exactly_one():
    _, c = init_model(small(), 0)
    assert np.all(c.vector() == 1.0)


def test_wo_shape_for_default_width():
    p, _ = init_model(ModelConfig(num_layers=2, num_heads=4, d_model=128, d_ff=512), 0)
    assert all(layer.wo.shape == (128, 128) for layer in p.layers)


def test_init_truncated_normal():
    p, _ = init_model(small(d_model=64, d_ff=256), 0)
    w = np.concatenate([t.data.ravel() for n, t in p.named_tensors() if not no_decay(n)])
    assert np.abs(w).max() <= 0.04 + 1e-7
    assert 0.015 < w.std() < 0.02


def test_theta0_is_a_frozen_copy():
    p, _ = init_model(small(), 0)
    p.layers[0].w1.data += 1.0
    assert not np.array_equal(p.theta0["layers.0.w1"], p.layers[0].w1.data)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(num_heads=3, d_model=16)
    with pytest.raises(KeyError):
        ModelConfig.from_dict({"num_layers": 1, "bogus": 2})


def test_mlm_logit_shape():
    cfg = small(vocab_size=50)
    p, c = init_model(cfg, 0)
    assert forward(p, c, None, ids((2, 8), 50)).shape == (2, 8, 50)


def test_classification_logit_shape():
    cfg = small(task_head="classification", num_classes=2)
    p, c = init_model(cfg, 0)
    assert forward(p, c, None, ids((2, 8))).shape == (2, 2)


def test_rejects_long_sequences_and_bad_ids():
    p, c = init_model(small(), 0)
    with pytest.raises(ShapeError):
        forward(p, c, None, ids((1, 9)))
    with pytest.raises(ValueError):
        forward(p, c, None, np.array([[0, 11]]))


def test_batch_permutation_equivariance():
    p, c = init_model(small(), 1)
    x = ids((5, 6))
    perm = np.array([3, 0, 4, 1, 2])
    with no_grad():
        a = forward(p, c, None, x).data
        b = forward(p, c, None, x[perm]).data
    np.testing.assert_allclose(b, a[perm], atol=1e-6)


def test_forward_deterministic():
    p, c = init_model(small(), 2)
    x = ids((2, 8))
    assert forward(p, c, None, x).data.tobytes() == forward(p, c, None, x).data.tobytes()


def test_neutral_coefficients_match_plain_transformer():
    p, c = init_model(small(), 0)
    x = ids((2, 8))
    full_mask = TicketMask.ones(p.config)
    np.testing.assert_array_equal(forward(p, c, full_mask, x).data, forward(p, None, None, x).data)


def test_all_heads_masked_is_pure_residual():
    with precision(np.float64):
        p, _ = init_model(small(), 0)
        x = Tensor(np.random.default_rng(0).normal(size=(2, 5, 16)))
        layer = p.layers[0]
        out = multi_head_attention(x, layer, None, np.zeros(4, bool), 4)
        ref = layer_norm(x, layer.ln1_g, layer.ln1_b)
        np.testing.assert_allclose(out.data, ref.data, atol=1e-12)


def test_all_neurons_masked_leaves_bias_only():
    with precision(np.float64):
        p, _ = init_model(small(), 0)
        layer = p.layers[0]
        layer.b2.data = np.random.default_rng(1).normal(size=16)
        x = Tensor(np.random.default_rng(0).normal(size=(2, 5, 16)))
        out = ffn(x, layer, None, np.zeros(24, bool))
        ref = layer_norm(x + Tensor(layer.b2.data), layer.ln2_g, layer.ln2_b)
        np.testing.assert_allclose(out.data, ref.data, atol=1e-12)


def scaled_heads(layer, x, head_coeffs):
    """Concatenated head outputs after coefficient scaling (the W_O input)."""
    c = Tensor(head_coeffs)
    return concat([scale(attention_head(x, layer, i, 4), slice_(c, 0, i, i + 1)) for i in range(4)])


def test_halving_head_coefficient_halves_its_branch():
    with precision(np.float64):
        p, _ = init_model(small(), 0)
        x = ids((2, 6))
        layer = p.layers[1]
        with no_grad():
            xin = encode(p, x, num_layers=1)
            half = np.ones(4)
            half[2] = 0.5
            diff = matmul(scaled_heads(layer, xin, np.ones(4)), layer.wo).data - matmul(
                scaled_heads(layer, xin, half), layer.wo
            ).data
            branch = head_branch(p, x, 1, 2).data
        np.testing.assert_allclose(diff, 0.5 * branch @ layer.wo.data[8:12], atol=1e-12)


def test_head_branch_scales_linearly_with_coefficient():
    with precision(np.float64):
        p, _ = init_model(small(), 0)
        x = Tensor(np.random.default_rng(3).normal(size=(1, 5, 16)))
        unit = scaled_heads(p.layers[0], x, np.ones(4)).data[..., 4:8]
        for alpha in (0.0, 0.3, -2.0):
            hc = np.ones(4)
            hc[1] = alpha
            scaled = scaled_heads(p.layers[0], x, hc).data[..., 4:8]
            np.testing.assert_allclose(scaled, alpha * unit, atol=1e-14)


def test_zero_neuron_coefficient_equals_deleting_the_neuron():
    with precision(np.float64):
        cfg = small(num_layers=1)
        p, _ = init_model(cfg, 0)
        c = SlimCoefficients.ones(cfg)
        c.neuron[0].data[5] = 0.0
        x = ids((2, 7))
        mask = TicketMask.ones(cfg)
        mask.neurons[0, 5] = False
        _, pruned = apply_ticket(p.theta0, cfg, mask)
        with no_grad():
            np.testing.assert_allclose(forward(p, c, None, x).data, forward(pruned, None, None, x).data, atol=1e-6)


def test_zero_head_coefficient_equals_removing_the_head():
    cfg = small()
    p, _ = init_model(cfg, 4)
    c = SlimCoefficients.ones(cfg)
    c.head[1].data[3] = 0.0
    mask = TicketMask.ones(cfg)
    mask.heads[1, 3] = False
    _, pruned = apply_ticket(p.theta0, cfg, mask)
    x = ids((3, 8))
    with no_grad():
        diff = np.abs(forward(p, c, None, x).data - forward(pruned, None, None, x).data).max()
    assert diff <= 1e-6


def test_encode_partial_depth():
    p, c = init_model(small(), 0)
    x = ids((1, 4))
    assert encode(p, x, num_layers=0).shape == (1, 4, 16)


def test_no_decay_names():
    assert no_decay("layers.0.b1") and no_decay("layers.1.ln2_g") and no_decay("emb_ln_b") and no_decay("head_b")
    assert not no_decay("layers.0.w1") and not no_decay("layers.0.wq.2") and not no_decay("tok_emb")
