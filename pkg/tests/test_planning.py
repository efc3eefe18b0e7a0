import csv
import io

import numpy as np
import pytest

from pcnode.baselines import RnnModel
from pcnode.pcode import PcOdeModel
from pcnode.planning import (Planner, ShotProblem, executed_min_distance, plan_and_execute, pocket_distance,
                             propose_actions, rows_to_csv, score_action, score_actions, success_curve,
                             update_totals)


def test_single_candidate_in_band():
    a = propose_actions(1, np.random.default_rng(0))
    speed = np.linalg.norm(a, axis=1)
    assert a.shape == (1, 2) and 0.05 <= speed[0] <= 0.2


def test_directions_cover_quadrants():
    a = propose_actions(1000, np.random.default_rng(1))
    quads = {(bool(x > 0), bool(y > 0)) for x, y in a}
    assert len(quads) == 4


def test_proposals_reproducible():
    assert np.array_equal(propose_actions(7, np.random.default_rng(3)), propose_actions(7, np.random.default_rng(3)))


def test_propose_rejects_zero():
    with pytest.raises(ValueError):
        propose_actions(0, np.random.default_rng(0))


def test_resting_target_distance():
    prob = ShotProblem(np.array([[0.2, 0.8], [0.9, 0.05]]))
    # cue moves away from the target, so the target never moves
    d = score_action(Planner("sim", "simulator"), prob, [-0.05, 0.0])
    assert d == pytest.approx(np.hypot(0.1, 0.05), abs=1e-12)
    assert d < prob.success_radius


def test_boundary_distance_is_failure():
    prob = ShotProblem(np.array([[0.2, 0.8], [0.5, 0.5]]))
    assert not (pocket_distance(np.array([1.0 - 0.17, 0.0]), prob) < prob.success_radius)


def test_direct_shot_is_pocketed():
    # cue, target and the reachable corner spot (0.9, 0.1) on one line: a straight push
    prob = ShotProblem(np.array([[0.3, 0.7], [0.5, 0.5]]))
    direction = np.array([1.0, -1.0]) / np.sqrt(2)
    d = executed_min_distance(prob, direction * 0.15)
    assert d < prob.success_radius


def test_model_dimension_mismatch():
    m = PcOdeModel(2, 4, np.random.default_rng(0))
    prob = ShotProblem(np.array([[0.3, 0.7], [0.5, 0.5]]))
    with pytest.raises(ValueError):
        score_actions(Planner("pc", "model", m), prob, np.array([[0.1, 0.0]]))


def test_simulator_dominates_random_and_csv():
    rows = plan_and_execute([Planner("simulator", "simulator"), Planner("random", "random")], 40,
                            budgets=[1, 5, 20], seed=1)
    curve = success_curve(rows)
    for b in (1, 5, 20):
        assert curve["simulator"][b] >= curve["random"][b]
    # the random planner ignores the budget
    assert len(set(curve["random"].values())) == 1
    sim = curve["simulator"]
    assert sim[1] <= sim[5] <= sim[20]
    table = list(csv.reader(io.StringIO(rows_to_csv(rows))))
    assert table[0] == ["problem", "planner", "budget", "success", "cell_updates"]
    assert len(table) == 1 + 40 * 2 * 3


def test_budget_one_gives_one_point_per_planner():
    m = RnnModel(4, 4, np.random.default_rng(0))
    rows = plan_and_execute([Planner("random", "random"), Planner("rnn", "model", m)], 3, budgets=[1])
    assert {k: list(v) for k, v in success_curve(rows).items()} == {"random": [1], "rnn": [1]}


def test_planner_determinism_and_update_counts():
    pc = PcOdeModel(4, 4, np.random.default_rng(0))
    pc.dt_head.weight.data[:] = 0.0
    pc.dt_head.bias.data[:] = 4.0
    rnn = RnnModel(4, 4, np.random.default_rng(0))
    planners = [Planner("pc", "model", pc), Planner("rnn", "model", rnn)]
    a = rows_to_csv(plan_and_execute(planners, 4, budgets=[1, 3], seed=5))
    b = rows_to_csv(plan_and_execute(planners, 4, budgets=[1, 3], seed=5))
    assert a == b
    totals = update_totals(plan_and_execute(planners, 4, budgets=[1, 3], seed=5))
    assert totals["rnn"][1] == 4 * 35
    assert totals["pc"][3] < totals["rnn"][3]
