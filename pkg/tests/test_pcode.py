import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcnode import tensor as T
from pcnode.pcode import (ConfigError, LatentSegment, PcOdeModel, TrainConfig, cell_update, evaluate_hidden,
                          executed_step, optimal_dt_linesearch, rollout, select_epsilon, step_losses,
                          teacher_forced_pass)

from helpers import module_gradcheck
from reference import sequential_item


def small_model(seed=0, obs=2, d=3, hidden=4):
    return PcOdeModel(obs, d, np.random.default_rng(seed), hidden=hidden)


def linear_decoder_model(obs=1, d=1):
    """Decoder reduced to the identity on a one-dimensional latent."""
    m = small_model(obs=obs, d=d, hidden=1)
    dec = m.decoder
    for p in dec.parameters():
        p.data[:] = 0.0
    dec.inp.weight.data[:] = 1.0
    dec.out.weight.data[:] = 1.0
    for blk in dec.blocks:
        blk.bias.data[:] = -1e9     # relu branch permanently off
    return m


# --- evaluate_hidden ---------------------------------------------------------

def test_evaluate_at_anchor_is_exact():
    seg = LatentSegment(np.array([0.3, -1.7]), np.array([5.0, 2.0]), 4.0, 3.0)
    assert np.array_equal(evaluate_hidden(seg, 4.0), seg.h_anchor)


def test_evaluate_linear_example():
    seg = LatentSegment(np.array([1.0, 0.0]), np.array([0.5, -1.0]), 0.0, 1.0)
    assert np.array_equal(evaluate_hidden(seg, 2.0), [2.0, -2.0])


def test_evaluate_before_anchor_raises():
    seg = LatentSegment(np.zeros(2), np.zeros(2), 3.0, 1.0)
    with pytest.raises(ValueError):
        evaluate_hidden(seg, 2.0)


def test_segment_dimension_mismatch():
    with pytest.raises(Exception):
        LatentSegment(np.zeros(2), np.zeros(3), 0.0, 1.0)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 8), st.integers(1, 8), st.integers(1, 8))
def test_substep_composition_bit_consistent(seed, tau, a, b):
    # dyadic anchors and velocities keep every product exact in binary floating point
    rng = np.random.default_rng(seed)
    h = rng.integers(-2**20, 2**20, size=5) / 2**10
    hd = rng.integers(-2**20, 2**20, size=5) / 2**10
    seg = LatentSegment(h, hd, float(tau), 1.0)
    mid = LatentSegment(evaluate_hidden(seg, tau + a), hd, float(tau + a), 1.0)
    assert np.array_equal(evaluate_hidden(mid, tau + a + b), evaluate_hidden(seg, tau + a + b))
    assert np.array_equal(evaluate_hidden(seg, tau + a), h + hd * a)


# --- jump cell ----------------------------------------------------------------

@pytest.mark.parametrize("pre,expected", [(0.0, 1.0), (3.5, 4.5), (-2.0, 0.98)])
def test_step_head_values(pre, expected):
    m = small_model()
    m.dt_head.weight.data[:] = 0.0
    m.dt_head.bias.data[:] = pre
    out = m.step_size(T.Tensor(np.ones((1, 3)))).data[0, 0]
    assert out == pytest.approx(expected, abs=1e-12)


def test_cell_update_bookkeeping():
    m = small_model()
    z = m.encode(np.ones((1, 2)))
    s0 = cell_update(m, None, z)
    assert s0.tau == 0.0 and s0.h_anchor.shape == (3,)
    s0.dt_pred = 2.6
    s1 = cell_update(m, s0, z)
    assert s1.tau == 3.0


def test_cell_update_rejects_wrong_width():
    m = small_model()
    with pytest.raises(Exception):
        cell_update(m, None, np.ones((1, 5)))


def test_executed_step_clamps_and_rounds():
    assert executed_step(0.98) == 1
    assert executed_step(0.2) == 1
    assert executed_step(4.5) == 4     # round half to even
    assert executed_step(5.51) == 6


# --- line search ----------------------------------------------------------------

def test_linesearch_exact_line_runs_to_end():
    m = linear_decoder_model()
    seg = LatentSegment(np.array([0.0]), np.array([1.0]), 0.0, 1.0)
    truth = np.arange(1, 20, dtype=float)[:, None]
    assert optimal_dt_linesearch(m, seg, truth, 1e-3) == 19


def test_linesearch_first_step_violation_gives_one():
    m = linear_decoder_model()
    seg = LatentSegment(np.array([0.0]), np.array([1.0]), 0.0, 1.0)
    truth = np.full((10, 1), 50.0)
    assert optimal_dt_linesearch(m, seg, truth, 0.5) == 1


def test_linesearch_quadratic_against_enumeration():
    m = linear_decoder_model()
    # tangent line of y = t^2 at t = 3, anchored there
    seg = LatentSegment(np.array([9.0]), np.array([6.0]), 3.0, 1.0)
    truth = np.array([(3.0 + k) ** 2 for k in range(1, 15)])[:, None]
    eps = 0.5
    # brute force: the line misses t^2 by k^2 at offset k
    errors = [((9.0 + 6.0 * k) - (3.0 + k) ** 2) ** 2 for k in range(1, 15)]
    ok = 0
    for e in errors:
        if e >= eps:
            break
        ok += 1
    assert ok == 0
    assert optimal_dt_linesearch(m, seg, truth, eps) == max(1, ok)
    # looser tolerances admit longer steps, still matching the scan
    for eps in (2.0, 20.0, 300.0):
        k = next((i for i, e in enumerate(errors) if e >= eps), None)
        want = len(errors) if k is None else max(1, k)
        assert optimal_dt_linesearch(m, seg, truth, eps) == want


def test_linesearch_empty_suffix_raises():
    m = linear_decoder_model()
    seg = LatentSegment(np.array([0.0]), np.array([1.0]), 0.0, 1.0)
    with pytest.raises(ValueError):
        optimal_dt_linesearch(m, seg, np.zeros((0, 1)), 1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-4, 10.0), st.floats(1.0, 100.0))
def test_monotone_tolerance(seed, eps, factor):
    m = small_model(seed)
    rng = np.random.default_rng(seed)
    seg = LatentSegment(rng.normal(size=3), rng.normal(size=3), 0.0, 1.0)
    truth = rng.normal(size=(12, 2))
    assert optimal_dt_linesearch(m, seg, truth, eps) <= optimal_dt_linesearch(m, seg, truth, eps * factor)


# --- masked pass --------------------------------------------------------------------

def test_epsilon_zero_updates_every_step():
    m = small_model()
    x = np.random.default_rng(0).normal(size=(4, 7, 2))
    res = teacher_forced_pass(m, x, TrainConfig(epsilon=0.0, bootstrap_prob=0.0))
    assert all(v == 1 for row in res.dt_star for v in row)
    assert res.schedule[:-1].all() and not res.schedule[-1].any()


def test_epsilon_infinite_single_segment():
    m = small_model()
    x = np.random.default_rng(1).normal(size=(4, 7, 2))
    res = teacher_forced_pass(m, x, TrainConfig(epsilon=1e9, bootstrap_prob=0.0))
    assert res.cell_updates == 4
    assert all(row == [6] for row in res.dt_star)


def test_ragged_batch_rejected():
    m = small_model()
    with pytest.raises(ValueError):
        teacher_forced_pass(m, [np.zeros((5, 2)), np.zeros((6, 2))], TrainConfig())


def test_bootstrap_postpones_some_updates():
    m = small_model()
    x = np.random.default_rng(0).normal(size=(64, 10, 2))
    plain = teacher_forced_pass(m, x, TrainConfig(epsilon=0.0, bootstrap_prob=0.0))
    boot = teacher_forced_pass(m, x, TrainConfig(epsilon=0.0, bootstrap_prob=0.3), np.random.default_rng(1))
    assert boot.cell_updates < plain.cell_updates
    assert boot.mean_dt_star == 1.0    # postponed steps still violate at the first step


@pytest.mark.parametrize("seed", range(5))
def test_batched_equals_sequential(seed):
    rng = np.random.default_rng(seed)
    m = small_model(seed)
    x = np.cumsum(rng.normal(size=(6, 9, 2)) * 0.3, axis=1)
    eps = float(np.exp(rng.uniform(np.log(0.01), np.log(2.0))))
    with T.row_stable():
        res = teacher_forced_pass(m, x, TrainConfig(epsilon=eps, bootstrap_prob=0.0))
        for i in range(len(x)):
            stars, anchors, lx = sequential_item(m, x[i], eps)
            assert res.dt_star[i] == stars
            assert res.anchors[i] == anchors
            assert res.item_loss_x[i] == lx


@pytest.mark.parametrize("seed", range(3))
def test_pass_gradients_with_replayed_schedule(seed):
    rng = np.random.default_rng(seed)
    m = small_model(seed)
    m.dt_head.bias.data[:] = 0.7
    x = rng.normal(size=(3, 6, 2))
    cfg = TrainConfig(epsilon=0.8, bootstrap_prob=0.0, dt_loss_scale=0.1)
    sched = teacher_forced_pass(m, x, cfg).schedule
    assert module_gradcheck(m, lambda: teacher_forced_pass(m, x, cfg, schedule=sched).loss) < 1e-5


def test_loss_x_is_sum_over_steps():
    m = small_model()
    x = np.random.default_rng(2).normal(size=(3, 5, 2))
    res = teacher_forced_pass(m, x, TrainConfig(epsilon=0.0, bootstrap_prob=0.0))
    assert res.loss_x.item() == pytest.approx(res.item_loss_x.mean())


# --- rollout ---------------------------------------------------------------------------

def test_rollout_constant_unit_step():
    m = small_model()
    m.dt_head.weight.data[:] = 0.0
    m.dt_head.bias.data[:] = 0.0
    out = rollout(m, np.zeros((2, 3, 2)), 10, epsilon=math.inf)
    assert out.cell_updates == 2 * 10
    assert all(d == [1] * 10 for d in out.durations)


def test_rollout_accounting_identity():
    m = small_model()
    m.dt_head.bias.data[:] = 2.3
    out = rollout(m, np.random.default_rng(0).normal(size=(3, 4, 2)), 17, epsilon=0.5)
    for segs, durs in zip(out.segments, out.durations):
        taus = [s.tau for s in segs]
        assert len(segs) == len(durs)
        assert all(b > a for a, b in zip(taus, taus[1:]))
        assert all(d >= 1 for d in durs)
        assert sum(durs) == 17
    assert out.predictions.shape == (3, 18, 2)


def test_rollout_horizon_shorter_than_primer():
    with pytest.raises(ValueError):
        rollout(small_model(), np.zeros((1, 5, 2)), 3)


# --- epsilon policy --------------------------------------------------------------------

def test_select_epsilon_identity():
    assert select_epsilon(2.4e-5) == 2.4e-5


def test_select_epsilon_missing_baseline():
    with pytest.raises(ConfigError):
        select_epsilon(None)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epsilon=-1.0)
    with pytest.raises(ConfigError):
        TrainConfig(bootstrap_prob=1.5)


def test_step_losses_offsets():
    m = linear_decoder_model()
    seg = LatentSegment(np.array([2.0]), np.array([1.0]), 2.0, 1.0)
    assert np.allclose(step_losses(m, seg, np.array([[3.0], [5.0]])), [0.0, 1.0])
