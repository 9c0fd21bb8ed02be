import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from earlybird.autodiff import NonFiniteError, Tensor, strict_checks
from earlybird.model import SlimCoefficients, init_model
from earlybird.optim import OptimizerState, TrainSchedule, lr_at, optimizer_step
from earlybird.search import search_optimizer

from helpers import GRAD_MODEL


def scalar(value):
    return Tensor(np.array([value]), dtype=np.float64)


def test_first_step_matches_hand_calculation():
    p = scalar(0.5)
    state = OptimizerState.for_params([p])
    optimizer_step([p], [np.array([1.0])], state, 0.1)
    # m = 0.1, v = 0.001; bias corrected both give back g = 1
    m_hat = 0.1 / (1 - 0.9)
    v_hat = 0.001 / (1 - 0.999)
    assert p.data[0] == pytest.approx(0.5 - 0.1 * m_hat / (math.sqrt(v_hat) + 1e-8), abs=1e-15)
    assert p.data[0] == pytest.approx(0.4, abs=1e-8)


def test_decoupled_decay_scales_by_lr():
    p = scalar(2.0)
    state = OptimizerState.for_params([p], weight_decay=0.5)
    optimizer_step([p], [np.zeros(1)], state, 0.1)
    assert p.data[0] == pytest.approx(2.0 * (1 - 0.1 * 0.5))


def test_zero_grads_no_decay_leave_params_unchanged():
    params, _ = init_model(GRAD_MODEL, 0)
    tensors = params.tensors()
    before = [t.data.copy() for t in tensors]
    state = OptimizerState.for_params(tensors)
    for _ in range(3):
        optimizer_step(tensors, [None] * len(tensors), state, 1e-2)
    for t, b in zip(tensors, before):
        np.testing.assert_array_equal(t.data, b)
    assert state.step == 3


def test_identical_runs_are_bitwise_identical():
    def run():
        rng = np.random.default_rng(0)
        p = Tensor(rng.normal(size=(3, 4)))
        state = OptimizerState.for_params([p], weight_decay=0.01)
        for _ in range(5):
            optimizer_step([p], [rng.normal(size=(3, 4))], state, 1e-3)
        return p.data.tobytes(), state.m[0].tobytes(), state.v[0].tobytes()

    assert run() == run()


def test_moments_match_parameter_shapes():
    params, _ = init_model(GRAD_MODEL, 0)
    state = OptimizerState.for_params(params.tensors())
    assert [m.shape for m in state.m] == [t.shape for t in params.tensors()]


def test_negative_lr_rejected():
    with pytest.raises(ValueError):
        optimizer_step([scalar(1.0)], [np.ones(1)], OptimizerState.for_params([scalar(1.0)]), -1.0)


def test_non_finite_grad_aborts_under_strict_checks():
    p = scalar(1.0)
    with strict_checks(True), pytest.raises(NonFiniteError):
        optimizer_step([p], [np.array([np.nan])], OptimizerState.for_params([p]), 0.1)


def test_coefficients_are_fixed_points_without_gradient():
    params, _ = init_model(GRAD_MODEL, 0)
    coeffs = SlimCoefficients.ones(GRAD_MODEL)
    tensors, state = search_optimizer(params, coeffs, weight_decay=0.5)
    for _ in range(4):
        optimizer_step(tensors, [None] * len(tensors), state, 0.1)
    assert np.all(coeffs.vector() == 1.0)
    # weights that do decay moved, so the exemption is what kept coefficients still
    assert not np.array_equal(params.layers[0].w1.data, params.theta0["layers.0.w1"])


# -- schedule ---------------------------------------------------------------

def test_lr_starts_at_zero():
    assert lr_at(0, TrainSchedule(total_steps=100)) == 0.0


def test_lr_peaks_at_warmup_end():
    s = TrainSchedule(total_steps=100, base_lr=3e-4, lr_scale=2.0)
    assert lr_at(10, s) == 6e-4


def test_lr_decays_linearly_to_zero():
    s = TrainSchedule(total_steps=100, base_lr=1e-3)
    tail = [lr_at(t, s) for t in range(90, 100)]
    steps = np.diff(tail)
    np.testing.assert_allclose(steps, steps[0])
    assert tail[-1] == pytest.approx(1e-3 / 90)
    assert tail[-1] + steps[0] == pytest.approx(0.0, abs=1e-18)


def test_lr_rejects_out_of_range_step():
    with pytest.raises(ValueError):
        lr_at(100, TrainSchedule(total_steps=100))


def test_budget_fraction_uses_exact_decimal():
    assert TrainSchedule(total_steps=1000, step_budget_fraction=0.8).executed_steps() == 800
    # in floating point 0.29 * 100 is 28.999999999999996
    assert TrainSchedule(total_steps=100, step_budget_fraction=0.29).executed_steps() == 29


@given(st.integers(1, 10_000), st.sampled_from([1.0, 0.8, 0.6, 0.4, 0.29, 0.57]))
def test_budget_fraction_is_floor_of_product(total, beta):
    s = TrainSchedule(total_steps=total, step_budget_fraction=beta)
    assert s.executed_steps() == max(1, math.floor(Fraction(str(beta)) * total))


def test_epoch_schedule_needs_steps_per_epoch():
    s = TrainSchedule(epochs=2.5)
    assert s.executed_steps(10) == 25
    with pytest.raises(ValueError):
        s.executed_steps()


@pytest.mark.parametrize("kw", [dict(step_budget_fraction=0.0), dict(step_budget_fraction=1.5), dict(lr_scale=0.0),
                                dict(batch_size=0), dict(warmup_fraction=1.0)])
def test_schedule_validation(kw):
    with pytest.raises(ValueError):
        TrainSchedule(total_steps=10, **kw)
