import math

import numpy as np
import pytest

from pcnode import tensor as T
from pcnode.baselines import OdeRnnModel, RnnModel, ode_integrate, odernn_pass, rnn_pass, rnn_rollout

from helpers import module_gradcheck


def test_rk4_zero_field():
    h = np.array([1.0, -2.0])
    assert np.array_equal(ode_integrate(lambda x: 0.0 * x, h, 1.0, 3), h)


def test_rk4_constant_field_exact():
    c = np.array([0.25, -0.5])
    out = ode_integrate(lambda x: c + 0.0 * x, np.zeros(2), 2.0, 4)
    assert np.array_equal(out, c * 2.0)


def test_rk4_exponential_decay():
    h0 = np.array([1.0, 3.0])
    out = ode_integrate(lambda x: -x, h0, 1.0, 4)
    # one classical RK4 step multiplies by the degree-4 Taylor polynomial of exp(-h)
    h = 0.25
    amp = 1 - h + h**2 / 2 - h**3 / 6 + h**4 / 24
    assert np.allclose(out, h0 * amp**4, rtol=1e-13)
    assert np.allclose(out, h0 * math.exp(-1.0), rtol=5e-5)
    assert np.allclose(ode_integrate(lambda x: -x, h0, 1.0, 8), h0 * math.exp(-1.0), rtol=1e-5)


def test_rk4_fourth_order():
    ratios = []
    prev = None
    for n in (2, 4, 8, 16, 32):
        err = abs(ode_integrate(lambda x: -x, np.array([1.0]), 1.0, n)[0] - math.exp(-1.0))
        if prev is not None:
            ratios.append(prev / err)
        prev = err
    assert all(15.0 < r < 20.0 for r in ratios), ratios
    assert abs(ratios[-1] - 16.0) < 1.0


@pytest.mark.parametrize("span,sub", [(0.0, 2), (-1.0, 2), (1.0, 0)])
def test_rk4_rejects_bad_arguments(span, sub):
    with pytest.raises(ValueError):
        ode_integrate(lambda x: x, np.ones(1), span, sub)


def test_rnn_pass_counts_and_shapes():
    m = RnnModel(2, 4, np.random.default_rng(0))
    res = rnn_pass(m, np.zeros((3, 2, 2)))
    assert res.cell_updates == 1
    res = rnn_pass(m, np.zeros((3, 6, 2)))
    assert res.cell_updates == 5 and res.mean_dt_star == 1.0


def test_rnn_rejects_ragged():
    m = RnnModel(2, 4, np.random.default_rng(0))
    with pytest.raises(ValueError):
        rnn_pass(m, [np.zeros((3, 2)), np.zeros((4, 2))])


def test_odernn_nfe_accounting():
    m = OdeRnnModel(2, 4, np.random.default_rng(0), substeps=3)
    x = np.zeros((2, 8, 2))
    res = odernn_pass(m, x)
    assert res.nfe == 7 * 3 * 4
    out = rnn_rollout(m, x[:, :2], 7)
    assert out.nfe == 7 * 3 * 4
    assert out.mean_dt == 1.0


def test_odernn_with_zero_dynamics_equals_rnn():
    rnn = RnnModel(2, 4, np.random.default_rng(5))
    ode = OdeRnnModel(2, 4, np.random.default_rng(5), substeps=1)
    for p in ode.dynamics.parameters():
        p.data[:] = 0.0
    x = np.random.default_rng(1).normal(size=(3, 6, 2))
    assert rnn_pass(rnn, x).loss.item() == rnn_pass(ode, x).loss.item()
    a = rnn_rollout(rnn, x[:, :2], 5).predictions
    b = rnn_rollout(ode, x[:, :2], 5).predictions
    assert np.array_equal(a, b)


@pytest.mark.parametrize("kind", [RnnModel, OdeRnnModel])
def test_baseline_gradients(kind):
    rng = np.random.default_rng(3)
    m = kind(2, 3, rng, hidden=4)
    x = rng.normal(size=(2, 4, 2))
    assert module_gradcheck(m, lambda: rnn_pass(m, x).loss) < 1e-5


def test_rollout_uses_own_predictions_after_primer():
    m = RnnModel(2, 4, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(1, 8, 2))
    a = rnn_rollout(m, x[:, :3], 7).predictions
    y = x.copy()
    y[:, 3:] += 100.0        # observations after the primer must not matter
    b = rnn_rollout(m, y[:, :3], 7).predictions
    assert np.array_equal(a, b)


def test_rollout_horizon_check():
    m = RnnModel(2, 4, np.random.default_rng(0))
    with pytest.raises(ValueError):
        rnn_rollout(m, np.zeros((1, 5, 2)), 4)
