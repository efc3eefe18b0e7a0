"""Random-shooting planner for a two-ball pocket game.

Ball 0 is the cue ball, ball 1 the target. An action is the cue ball's
initial velocity; a shot succeeds when the target's center comes strictly
within ``success_radius`` of the pocket at some integer step of the horizon.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .baselines import rnn_rollout
from .pcode import rollout
from .worlds import BilliardsState, _random_positions, simulate


@dataclass(frozen=True)
class ShotProblem:
    positions: np.ndarray               # (2, 2): cue, target; both at rest
    pocket: tuple[float, float] = (1.0, 0.0)
    success_radius: float = 0.17
    horizon: int = 35
    radius: float = 0.1
    substeps: int = 10

    def state(self, action) -> BilliardsState:
        vel = np.zeros((2, 2))
        vel[0] = np.asarray(action, dtype=np.float64)
        return BilliardsState(np.array(self.positions, dtype=np.float64), vel, self.radius)


@dataclass
class EpisodeResult:
    action: np.ndarray
    predicted_min_dist: float
    executed_min_dist: float
    success: bool
    cell_updates: int
    candidates: int


@dataclass
class Planner:
    """``kind`` is "simulator", "random", or "model" (then ``model`` must be set)."""

    name: str
    kind: str
    model: object = None
    primer: int = 2

    def __post_init__(self):
        if self.kind not in ("simulator", "random", "model"):
            raise ValueError(f"unknown planner kind {self.kind!r}")
        if self.kind == "model" and self.model is None:
            raise ValueError(f"planner {self.name!r} needs a model")


def random_problem(rng: np.random.Generator, radius: float = 0.1, **kw) -> ShotProblem:
    """Non-overlapping rest positions; the target may not start inside the pocket zone."""
    while True:
        pos = _random_positions(rng, 2, radius)
        prob = ShotProblem(pos, radius=radius, **kw)
        if pocket_distance(pos[1], prob) >= prob.success_radius:
            return prob


def pocket_distance(xy, problem: ShotProblem) -> np.ndarray:
    xy = np.asarray(xy, dtype=np.float64)
    return np.linalg.norm(xy - np.asarray(problem.pocket), axis=-1)


def propose_actions(k: int, rng: np.random.Generator, speed_min: float = 0.05, speed_max: float = 0.2) -> np.ndarray:
    if k < 1:
        raise ValueError(f"propose_actions: k must be >= 1, got {k}")
    ang = rng.uniform(0.0, 2.0 * np.pi, size=k)
    speed = rng.uniform(speed_min, speed_max, size=k)
    return np.stack([np.cos(ang), np.sin(ang)], axis=1) * speed[:, None]


def simulate_shot(problem: ShotProblem, action) -> np.ndarray:
    """Positions (horizon+1, 2, 2) of both balls under the true dynamics."""
    states = simulate(problem.state(action), problem.horizon, problem.substeps)
    return np.stack([s.pos for s in states])


def executed_min_distance(problem: ShotProblem, action) -> float:
    return float(pocket_distance(simulate_shot(problem, action)[:, 1], problem).min())


def score_actions(planner: Planner, problem: ShotProblem, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Predicted minimum target-pocket distance per action, and cell updates spent per action."""
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    k = len(actions)
    if planner.kind == "random":
        return np.zeros(k), np.zeros(k, dtype=np.int64)
    if planner.kind == "simulator":
        return np.array([executed_min_distance(problem, a) for a in actions]), np.zeros(k, dtype=np.int64)
    model = planner.model
    if model.obs_dim != 4:
        raise ValueError(f"score_action: model observes {model.obs_dim} features, planning needs 4 (two 2D positions)")
    # the action enters through a short simulated primer
    primer = np.stack([simulate_shot_prefix(problem, a, planner.primer) for a in actions])
    horizon = problem.horizon
    if model.kind == "pcode":
        out = rollout(model, primer, horizon)
        updates = np.array([len(s) for s in out.segments], dtype=np.int64)
    else:
        out = rnn_rollout(model, primer, horizon)
        updates = np.full(k, out.cell_updates // k, dtype=np.int64)
    traj = out.predictions.copy()
    traj[:, :planner.primer] = primer
    target = traj[:, :, 2:4]
    return pocket_distance(target, problem).min(axis=1), updates


def simulate_shot_prefix(problem: ShotProblem, action, steps: int) -> np.ndarray:
    states = simulate(problem.state(action), steps - 1, problem.substeps)
    pos = [s.pos.ravel() for s in states]
    return np.stack(pos)


def score_action(planner: Planner, problem: ShotProblem, action) -> float:
    return float(score_actions(planner, problem, np.asarray(action)[None])[0][0])


@dataclass
class PlanRow:
    problem: int
    planner: str
    budget: int
    success: bool
    cell_updates: int
    episode: EpisodeResult = field(repr=False, default=None)


def plan_and_execute(planners: list[Planner], n_problems: int, budgets=(1, 5, 10, 20), seed: int = 0,
                     speed_min: float = 0.05, speed_max: float = 0.2) -> list[PlanRow]:
    """Every planner sees the same problems and the same nested candidate lists.

    For budget b the first b candidates are scored and the argmin is executed
    in the simulator; the random planner executes candidate 0.
    """
    budgets = sorted(set(int(b) for b in budgets))
    if not budgets or budgets[0] < 1:
        raise ValueError("budgets must be positive")
    rows = []
    for pid in range(n_problems):
        rng = np.random.default_rng([seed, pid])
        problem = random_problem(rng)
        cands = propose_actions(budgets[-1], rng, speed_min, speed_max)
        outcome_cache: dict[int, float] = {}
        for planner in planners:
            scores, updates = score_actions(planner, problem, cands)
            for b in budgets:
                pick = 0 if planner.kind == "random" else int(np.argmin(scores[:b]))
                if pick not in outcome_cache:
                    outcome_cache[pick] = executed_min_distance(problem, cands[pick])
                dist = outcome_cache[pick]
                used = 0 if planner.kind == "random" else int(updates[:b].sum())
                ep = EpisodeResult(cands[pick], float(scores[pick]), dist, dist < problem.success_radius,
                                   used, b)
                rows.append(PlanRow(pid, planner.name, b, ep.success, used, ep))
    return rows


def success_curve(rows: list[PlanRow]) -> dict[str, dict[int, float]]:
    acc: dict[str, dict[int, list[bool]]] = {}
    for r in rows:
        acc.setdefault(r.planner, {}).setdefault(r.budget, []).append(r.success)
    return {p: {b: float(np.mean(v)) for b, v in sorted(per.items())} for p, per in acc.items()}


def update_totals(rows: list[PlanRow]) -> dict[str, dict[int, int]]:
    acc: dict[str, dict[int, int]] = {}
    for r in rows:
        per = acc.setdefault(r.planner, {})
        per[r.budget] = per.get(r.budget, 0) + r.cell_updates
    return acc


def rows_to_csv(rows: list[PlanRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["problem", "planner", "budget", "success", "cell_updates"])
    for r in rows:
        w.writerow([r.problem, r.planner, r.budget, int(r.success), r.cell_updates])
    return buf.getvalue()
