"""Piecewise-linear latent sequence model with learned, adaptive step sizes.

The latent trajectory is a chain of linear segments. Each segment starts at
an anchor time ``tau`` with state ``h`` and velocity ``h_dot`` and lasts a
predicted ``dt``; a GRU jump produces the next segment. Evaluating the
latent at any time inside a segment is a single exact Euler step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import GruCell, Linear, Module, ObsScaler, ResidualMlp
from .tensor import ShapeError, Tensor


class ConfigError(ValueError):
    pass


@dataclass
class LatentSegment:
    h_anchor: np.ndarray
    h_dot: np.ndarray
    tau: float
    dt_pred: float

    def __post_init__(self):
        if np.shape(self.h_anchor) != np.shape(self.h_dot):
            raise ShapeError("LatentSegment", np.shape(self.h_anchor), np.shape(self.h_dot))


def evaluate_hidden(seg: LatentSegment, t: float) -> np.ndarray:
    if t < seg.tau:
        raise ValueError(f"evaluate_hidden: t={t} precedes segment anchor tau={seg.tau}")
    return seg.h_anchor + seg.h_dot * (t - seg.tau)


@dataclass
class TrainConfig:
    epsilon: float = math.inf
    dt_loss_scale: float = 1e-5
    bootstrap_prob: float = 0.01
    batch_size: int = 256
    steps: int = 10_000
    lr: float = 1e-3
    gamma: float = 0.9
    decay_every: int = 5000
    primer_len: int = 5
    # feed the model's own decoded prediction into training jumps instead of x_t
    decoded_inputs: bool = False

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if not 0.0 <= self.bootstrap_prob <= 1.0:
            raise ConfigError(f"bootstrap_prob must lie in [0, 1], got {self.bootstrap_prob}")


def select_epsilon(baseline_final_train_loss: float | None) -> float:
    """Error tolerance taken from a finished baseline RNN run."""
    if baseline_final_train_loss is None:
        raise ConfigError("epsilon from baseline requested but no baseline run is available")
    eps = float(baseline_final_train_loss)
    if not eps > 0 or not math.isfinite(eps):
        raise ConfigError(f"baseline loss {eps!r} is not a usable tolerance")
    return eps


class PcOdeModel(Module):
    kind = "pcode"

    def __init__(self, obs_dim: int, latent_dim: int, rng: np.random.Generator,
                 hidden: int | None = None, slope: float = 0.01):
        hidden = hidden or latent_dim
        self.obs_dim = obs_dim
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.slope = slope
        self.epsilon = math.inf
        self.encoder = ResidualMlp(obs_dim, hidden, latent_dim, rng)
        self.core = GruCell(latent_dim, 2 * latent_dim, rng)
        self.dt_head = Linear(latent_dim, 1, rng)
        self.decoder = ResidualMlp(latent_dim, hidden, obs_dim, rng)
        self.scaler = ObsScaler(obs_dim)

    def config(self) -> dict:
        return {"kind": self.kind, "obs_dim": self.obs_dim, "latent_dim": self.latent_dim,
                "hidden": self.hidden, "slope": self.slope}

    def encode(self, x) -> Tensor:
        return self.encoder(self.scaler.normalize(T.as_tensor(x)))

    def decode(self, h) -> Tensor:
        return self.scaler.denormalize(self.decoder(T.as_tensor(h)))

    def step_size(self, h: Tensor) -> Tensor:
        return T.add(T.leaky_relu(self.dt_head(h), self.slope), 1.0)

    def initial(self, batch: int) -> tuple[Tensor, Tensor]:
        d = self.latent_dim
        return T.Tensor(np.zeros((batch, d))), T.Tensor(np.zeros((batch, d)))

    def jump(self, h: Tensor, h_dot: Tensor, elapsed, z: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """One cell update. ``elapsed`` is the executed duration of the previous segment, shape (B, 1)."""
        d = self.latent_dim
        if z.shape[-1] != d:
            raise ShapeError("cell_update", z.shape, (z.shape[0], d))
        state = T.concat([h, T.mul(h_dot, T.as_tensor(elapsed))])
        g = self.core(state, z)
        h_new, hd_new = g[:, :d], g[:, d:]
        return h_new, hd_new, self.step_size(h_new)


def cell_update(model: PcOdeModel, seg_prev: LatentSegment | None, z, t: float | None = None) -> LatentSegment:
    """Jump to a new segment anchored at time ``t``.

    Without ``t`` the previous segment runs for its executed duration
    (predicted step rounded, at least one).
    """
    d = model.latent_dim
    z = T.as_tensor(np.atleast_2d(T.as_tensor(z).data))
    if seg_prev is None:
        h = np.zeros((1, d))
        hd = np.zeros((1, d))
        elapsed = 0.0
        tau = 0.0 if t is None else float(t)
    else:
        if np.shape(seg_prev.h_anchor)[-1] != d:
            raise ShapeError("cell_update", np.shape(seg_prev.h_anchor), (d,))
        elapsed = executed_step(seg_prev.dt_pred) if t is None else float(t) - seg_prev.tau
        if elapsed < 0:
            raise ValueError("cell_update: new anchor precedes previous anchor")
        h = np.reshape(seg_prev.h_anchor, (1, d))
        hd = np.reshape(seg_prev.h_dot, (1, d))
        tau = seg_prev.tau + elapsed
    with T.no_grad():
        hn, hdn, dt = model.jump(T.Tensor(h), T.Tensor(hd), np.full((1, 1), elapsed), z)
    return LatentSegment(hn.data[0].copy(), hdn.data[0].copy(), tau, float(dt.data[0, 0]))


def executed_step(dt_pred: float) -> int:
    """Inference step length: the prediction rounded to the observation grid, at least one."""
    if not math.isfinite(dt_pred):
        raise ValueError(f"non-finite step prediction {dt_pred}")
    return max(1, int(round(dt_pred)))


def step_losses(model: PcOdeModel, seg: LatentSegment, truth: np.ndarray) -> np.ndarray:
    """Per-step mean squared error of the coasting segment against ``truth``.

    ``truth[k]`` is the observation at time ``seg.tau + k + 1``.
    """
    truth = np.asarray(truth, dtype=np.float64)
    if truth.ndim != 2 or truth.shape[0] == 0:
        raise ValueError("step_losses: empty or malformed truth suffix")
    out = np.empty(truth.shape[0])
    with T.no_grad():
        for k in range(truth.shape[0]):
            h = evaluate_hidden(seg, seg.tau + k + 1)
            xhat = model.decode(h[None, :]).data
            out[k] = np.mean((xhat - truth[k:k + 1]) ** 2, axis=-1)[0]
    return out


def first_violation(losses: np.ndarray, epsilon: float) -> int | None:
    """Offset (1-based) of the first step whose loss reaches ``epsilon``."""
    bad = np.nonzero(~(losses < epsilon))[0]
    return int(bad[0]) + 1 if bad.size else None


def optimal_dt_linesearch(model: PcOdeModel, seg: LatentSegment, truth: np.ndarray, epsilon: float) -> int:
    """Largest integer step whose every intermediate prediction stays under ``epsilon``.

    Falls back to 1 when the very first step violates, and is capped by the
    length of ``truth`` (the observations after the anchor).
    """
    losses = step_losses(model, seg, truth)
    k = first_violation(losses, epsilon)
    if k is None:
        return len(losses)
    return max(1, k - 1)


@dataclass
class PassResult:
    loss: Tensor
    loss_x: Tensor
    loss_dt: Tensor
    item_loss_x: np.ndarray           # (B,) sum over t=1..T of the per-step loss
    item_loss_dt: np.ndarray          # (B,) sum over segments of squared step error
    dt_star: list[list[int]]
    dt_pred: list[list[float]]
    anchors: list[list[int]]
    schedule: np.ndarray              # (T+1, B) bool, rows where a jump was executed
    violations: np.ndarray            # (T+1, B) bool, loss >= epsilon

    @property
    def mean_dt_star(self) -> float:
        flat = [v for row in self.dt_star for v in row]
        return float(np.mean(flat)) if flat else float("nan")

    @property
    def cell_updates(self) -> int:
        return int(self.schedule.sum())


def teacher_forced_pass(model: PcOdeModel, batch: np.ndarray, cfg: TrainConfig,
                        rng: np.random.Generator | None = None,
                        schedule: np.ndarray | None = None) -> PassResult:
    """One masked teacher-forcing sweep over a batch of equal-length sequences.

    Every item jumps at t=0. At each later integer time the coasting
    prediction is scored; items whose loss reaches ``cfg.epsilon`` jump at
    that time, anchored on the encoded ground truth, the rest keep coasting.
    The whole batch goes through the GRU and a row mask picks which rows take
    the new segment. With probability ``cfg.bootstrap_prob`` a due jump is
    postponed by one step.

    ``schedule`` replays a recorded jump pattern instead of deciding from the
    losses; gradient checks use it to hold the discrete decisions fixed.
    """
    x = _as_batch(batch)
    B, steps, _ = x.shape
    Tn = steps - 1
    if Tn < 1:
        raise ValueError("teacher_forced_pass: sequences need at least two observations")
    eps = cfg.epsilon
    if rng is None:
        rng = np.random.default_rng(0)

    xs = [T.Tensor(x[:, t]) for t in range(steps)]
    h, hd = model.initial(B)
    h, hd, dt = model.jump(h, hd, np.zeros((B, 1)), model.encode(xs[0]))
    tau = np.zeros(B, dtype=np.int64)
    first_bad = np.full(B, -1, dtype=np.int64)

    sched = np.zeros((steps, B), dtype=bool)
    sched[0] = True
    viol_log = np.zeros((steps, B), dtype=bool)
    item_lx = np.zeros(B)
    item_ldt = np.zeros(B)
    dt_star: list[list[int]] = [[] for _ in range(B)]
    dt_pred: list[list[float]] = [[] for _ in range(B)]
    anchors: list[list[int]] = [[0] for _ in range(B)]
    lx_terms: list[Tensor] = []
    ldt_terms: list[Tensor] = []
    n_segments = 0

    def close(rows: np.ndarray, t_end: int):
        """Score the step prediction of the segments ending at ``t_end`` on ``rows``."""
        nonlocal n_segments
        target = np.zeros((B, 1))
        weight = np.zeros((B, 1))
        for i in np.nonzero(rows)[0]:
            if first_bad[i] >= 0:
                star = max(1, int(first_bad[i] - 1 - tau[i]))
            else:
                star = int(t_end - tau[i])
            target[i, 0] = star
            weight[i, 0] = 1.0
            dt_star[i].append(star)
            dt_pred[i].append(float(dt.data[i, 0]))
            item_ldt[i] += (dt.data[i, 0] - star) ** 2
        n_segments += int(rows.sum())
        diff = T.sub(dt, target)
        ldt_terms.append(T.sum_(T.mul(T.mul(diff, diff), weight)))

    for t in range(1, steps):
        elapsed = (t - tau).astype(np.float64)[:, None]
        h_t = T.add(h, T.mul(hd, elapsed))
        xhat = model.decode(h_t)
        per_item = T.row_mse(xhat, xs[t])
        lx_terms.append(T.mean(per_item))
        ell = per_item.data
        item_lx += ell
        viol = ~(ell < eps)
        viol_log[t] = viol
        fresh = viol & (first_bad < 0)
        first_bad[fresh] = t

        if t == Tn:
            break
        if schedule is not None:
            upd = np.asarray(schedule[t], dtype=bool)
        else:
            upd = viol.copy()
            if cfg.bootstrap_prob > 0 and upd.any():
                upd &= ~(rng.random(B) < cfg.bootstrap_prob)
        if not upd.any():
            continue
        sched[t] = upd
        close(upd, t)
        inp = xhat if cfg.decoded_inputs else xs[t]
        hn, hdn, dtn = model.jump(h, hd, elapsed, model.encode(inp))
        h = T.mask_blend(upd, hn, h)
        hd = T.mask_blend(upd, hdn, hd)
        dt = T.mask_blend(upd, dtn, dt)
        tau[upd] = t
        first_bad[upd] = -1
        for i in np.nonzero(upd)[0]:
            anchors[i].append(t)

    close(np.ones(B, dtype=bool), Tn)
    loss_x = _sum_terms(lx_terms)
    loss_dt = T.mul(_sum_terms(ldt_terms), 1.0 / max(n_segments, 1))
    loss = T.add(loss_x, T.mul(loss_dt, cfg.dt_loss_scale))
    return PassResult(loss, loss_x, loss_dt, item_lx, item_ldt, dt_star, dt_pred, anchors, sched, viol_log)


def _sum_terms(terms: list[Tensor]) -> Tensor:
    acc = terms[0]
    for term in terms[1:]:
        acc = T.add(acc, term)
    return acc


def _as_batch(batch) -> np.ndarray:
    if isinstance(batch, (list, tuple)):
        lengths = {np.shape(b)[0] for b in batch}
        if len(lengths) != 1:
            raise ValueError(f"ragged batch: sequence lengths {sorted(lengths)}")
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError("batch", x.shape)
    return x


@dataclass
class RolloutResult:
    predictions: np.ndarray                 # (B, horizon+1, obs_dim)
    segments: list[list[LatentSegment]]
    durations: list[list[int]]              # executed durations, last one clipped at the horizon

    @property
    def cell_updates(self) -> int:
        return sum(len(s) for s in self.segments)

    @property
    def mean_dt(self) -> float:
        flat = [d for row in self.durations for d in row]
        return float(np.mean(flat))


def rollout(model: PcOdeModel, primer: np.ndarray, horizon: int, epsilon: float | None = None) -> RolloutResult:
    """Prime on ground truth, then sample autoregressively up to ``horizon``.

    During the primer (times ``0..p-1``) a jump happens at t=0 and afterwards
    whenever the coasting prediction misses the observation by ``epsilon``
    or the active segment has run out; jumps consume the true observation.
    After the primer the model jumps only when its own predicted step
    expires, feeding back the decoded prediction. ``predictions[:, t]`` is
    the coasting prediction at ``t`` (before any jump there).
    """
    primer = np.asarray(primer, dtype=np.float64)
    if primer.ndim == 2:
        primer = primer[None]
    B, p, obs = primer.shape
    if p < 1:
        raise ValueError("rollout: primer must hold at least one observation")
    if horizon < p:
        raise ValueError(f"rollout: horizon {horizon} shorter than primer length {p}")
    eps = model.epsilon if epsilon is None else epsilon

    preds = np.zeros((B, horizon + 1, obs))
    segments: list[list[LatentSegment]] = [[] for _ in range(B)]
    with T.no_grad():
        h, hd = model.initial(B)
        h, hd, dt = model.jump(h, hd, np.zeros((B, 1)), model.encode(primer[:, 0]))
        preds[:, 0] = model.decode(h).data
        tau = np.zeros(B, dtype=np.int64)
        expiry = np.array([executed_step(v) for v in dt.data[:, 0]], dtype=np.int64)
        _record(segments, np.ones(B, dtype=bool), h, hd, dt, 0)

        for t in range(1, horizon + 1):
            elapsed = (t - tau).astype(np.float64)[:, None]
            xhat = model.decode(T.add(h, T.mul(hd, elapsed)))
            preds[:, t] = xhat.data
            if t == horizon:
                break
            due = t >= tau + expiry
            if t < p:
                ell = np.mean((xhat.data - primer[:, t]) ** 2, axis=-1)
                upd = due | ~(ell < eps)
                inp = primer[:, t]
            else:
                upd = due
                inp = xhat.data
            if not upd.any():
                continue
            hn, hdn, dtn = model.jump(h, hd, elapsed, model.encode(inp))
            h = T.mask_blend(upd, hn, h)
            hd = T.mask_blend(upd, hdn, hd)
            dt = T.mask_blend(upd, dtn, dt)
            tau[upd] = t
            for i in np.nonzero(upd)[0]:
                expiry[i] = executed_step(dt.data[i, 0])
            _record(segments, upd, h, hd, dt, t)

    durations = []
    for segs in segments:
        starts = [int(s.tau) for s in segs] + [horizon]
        durations.append([b - a for a, b in zip(starts[:-1], starts[1:])])
    return RolloutResult(preds, segments, durations)


def _record(segments, rows, h, hd, dt, t):
    for i in np.nonzero(rows)[0]:
        segments[i].append(LatentSegment(h.data[i].copy(), hd.data[i].copy(), float(t), float(dt.data[i, 0])))
