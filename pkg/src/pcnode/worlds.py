"""Ground-truth worlds: lines, circles, and a two-ball frictionless billiards box.

The billiards simulator is event driven inside each substep: it advances to
the earliest wall or ball contact, reflects, and continues, so contacts are
resolved at their exact time of impact.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

TASKS = ("lines", "circles", "bill1d", "bill2d", "pixbill1d", "pixbill2d")
FRAME = 28

DEFAULTS = {
    "lines": {"T": 20},
    "circles": {"T": 24, "speed": 0.3, "r_min": 1.0, "r_max": 2.0},
    "bill1d": {"T": 44, "radius": 0.1, "speed_min": 0.05, "speed_max": 0.15, "substeps": 10},
    "bill2d": {"T": 44, "radius": 0.1, "speed_min": 0.05, "speed_max": 0.15, "substeps": 10},
}
DEFAULTS["pixbill1d"] = dict(DEFAULTS["bill1d"])
DEFAULTS["pixbill2d"] = dict(DEFAULTS["bill2d"])


class SimulationError(RuntimeError):
    def __init__(self, msg: str, state: "BilliardsState"):
        super().__init__(f"{msg}\nstate: pos={state.pos.tolist()} vel={state.vel.tolist()} radius={state.radius}")
        self.state = state


class DatasetFormatError(ValueError):
    pass


# --- billiards ---------------------------------------------------------------


@dataclass(frozen=True)
class BilliardsState:
    pos: np.ndarray        # (2, dims)
    vel: np.ndarray        # (2, dims), box units per step
    radius: float = 0.1

    @property
    def dims(self) -> int:
        return self.pos.shape[1]

    def energy(self) -> float:
        return 0.5 * float(np.sum(self.vel * self.vel))


@dataclass
class Contact:
    """Ball-ball contact: velocities right before and right after resolution."""
    time: float
    pos: np.ndarray
    vel_before: np.ndarray
    vel_after: np.ndarray


def _wall_time(x, v, lo, hi):
    best = math.inf
    idx = None
    for (b, k), vv in np.ndenumerate(v):
        if vv > 0:
            s = (hi - x[b, k]) / vv
        elif vv < 0:
            s = (lo - x[b, k]) / vv
        else:
            continue
        s = max(s, 0.0)
        if s < best:
            best, idx = s, (b, k)
    return best, idx


def _pair_time(x, v, radius):
    dp = x[1] - x[0]
    dv = v[1] - v[0]
    b = float(dp @ dv)
    if b >= 0:
        return math.inf  # separating or parallel
    a = float(dv @ dv)
    c = float(dp @ dp) - (2 * radius) ** 2
    if c <= 0:
        return 0.0
    disc = b * b - a * c
    if disc < 0:
        return math.inf
    return c / (-b + math.sqrt(disc))


def elastic_exchange(pos: np.ndarray, vel: np.ndarray) -> np.ndarray:
    """Equal-mass elastic collision: swap the velocity components along the center line."""
    n = pos[1] - pos[0]
    n = n / np.linalg.norm(n)
    rel = float((vel[0] - vel[1]) @ n)
    out = vel.copy()
    out[0] = vel[0] - rel * n
    out[1] = vel[1] + rel * n
    return out


def step_billiards(state: BilliardsState, dt: float = 1.0, substeps: int = 10,
                   contacts: list | None = None, max_events: int = 1000, t0: float = 0.0) -> BilliardsState:
    """Advance by ``dt`` with exact time-of-impact handling inside each substep."""
    x = state.pos.astype(np.float64).copy()
    v = state.vel.astype(np.float64).copy()
    r = state.radius
    lo, hi = r, 1.0 - r
    h = dt / substeps
    now = t0
    for _ in range(substeps):
        left = h
        events = 0
        while left > 0:
            tw, widx = _wall_time(x, v, lo, hi)
            tp = _pair_time(x, v, r)
            s = min(tw, tp)
            if s >= left:
                x += v * left
                now += left
                break
            x += v * s
            now += s
            left -= s
            if tp <= tw:
                before = v.copy()
                v = elastic_exchange(x, v)
                if contacts is not None:
                    contacts.append(Contact(now, x.copy(), before, v.copy()))
            else:
                b, k = widx
                x[b, k] = hi if v[b, k] > 0 else lo
                v[b, k] = -v[b, k]
            events += 1
            if events > max_events:
                raise SimulationError("unresolvable contact sequence", BilliardsState(x, v, r))
        np.clip(x, lo, hi, out=x)
    return BilliardsState(x, v, r)


def random_billiards_state(rng: np.random.Generator, dims: int, radius: float = 0.1,
                           speed_min: float = 0.05, speed_max: float = 0.15) -> BilliardsState:
    pos = _random_positions(rng, dims, radius)
    speed = rng.uniform(speed_min, speed_max, size=2)
    if dims == 1:
        direction = rng.choice([-1.0, 1.0], size=(2, 1))
    else:
        ang = rng.uniform(0, 2 * np.pi, size=2)
        direction = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return BilliardsState(pos, direction * speed[:, None], radius)


def _random_positions(rng: np.random.Generator, dims: int, radius: float) -> np.ndarray:
    while True:
        pos = rng.uniform(radius, 1.0 - radius, size=(2, dims))
        if np.linalg.norm(pos[0] - pos[1]) > 2 * radius:
            return pos


def simulate(state: BilliardsState, steps: int, substeps: int = 10, contacts: list | None = None) -> list[BilliardsState]:
    states = [state]
    for k in range(steps):
        state = step_billiards(state, 1.0, substeps, contacts, t0=float(k))
        states.append(state)
    return states


# --- rendering ---------------------------------------------------------------


def render_pixels(state: BilliardsState, size: int = FRAME) -> np.ndarray:
    """Top-down grayscale frame; each ball is a disk with a one-pixel linear edge ramp."""
    frame = np.zeros((size, size))
    centers = (np.arange(size) + 0.5) / size
    cols, rows = np.meshgrid(centers, centers[::-1])   # row 0 is the top (y near 1)
    rpx = state.radius * size
    for b in range(state.pos.shape[0]):
        if state.dims == 1:
            cx, cy = state.pos[b, 0], 0.5
        else:
            cx, cy = state.pos[b, 0], state.pos[b, 1]
        dist = np.hypot(cols - cx, rows - cy) * size
        frame += np.clip(rpx + 0.5 - dist, 0.0, 1.0)
    return np.minimum(frame, 1.0)


# --- datasets ----------------------------------------------------------------


@dataclass
class Dataset:
    task: str
    obs: np.ndarray                       # (n, T+1, obs_dim) float32
    seed: int
    params: dict = field(default_factory=dict)
    states: np.ndarray | None = None      # (n, T+1, state_dim) float32

    @property
    def n(self) -> int:
        return self.obs.shape[0]

    @property
    def length(self) -> int:
        return self.obs.shape[1]

    @property
    def obs_dim(self) -> int:
        return self.obs.shape[2]

    def split(self, holdout: float = 0.1, seed: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Indices of (train, test) after a seeded shuffle; the final ``holdout`` share is test."""
        rng = np.random.default_rng(self.seed if seed is None else seed)
        order = rng.permutation(self.n)
        n_test = max(1, int(round(self.n * holdout)))
        return order[:-n_test], order[-n_test:]


def item_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def gen_lines(n: int, seed: int, T: int = 20) -> Dataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    obs = np.zeros((n, T + 1, 2))
    for i in range(n):
        c = item_rng(seed, i).uniform(0.0, 1.0)
        obs[i, :, 0] = np.arange(T + 1)
        obs[i, :, 1] = c
    return Dataset("lines", obs.astype(np.float32), seed, {"T": T})


def circle_points(radius: float, theta0: float, speed: float, T: int) -> np.ndarray:
    theta = theta0 + (speed / radius) * np.arange(T + 1)
    return radius * np.stack([np.cos(theta), np.sin(theta)], axis=1)


def gen_circles(n: int, seed: int, T: int = 24, speed: float = 0.3, r_min: float = 1.0, r_max: float = 2.0) -> Dataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    obs = np.zeros((n, T + 1, 2))
    for i in range(n):
        rng = item_rng(seed, i)
        theta0 = rng.uniform(0.0, 2 * np.pi)
        r = rng.uniform(r_min, r_max)
        obs[i] = circle_points(r, theta0, speed, T)
    params = {"T": T, "speed": speed, "r_min": r_min, "r_max": r_max}
    return Dataset("circles", obs.astype(np.float32), seed, params)


def billiards_trajectory(rng: np.random.Generator, dims: int, T: int, radius: float,
                         speed_min: float, speed_max: float, substeps: int) -> list[BilliardsState]:
    state = random_billiards_state(rng, dims, radius, speed_min, speed_max)
    return simulate(state, T, substeps)


def state_vector(s: BilliardsState) -> np.ndarray:
    return np.concatenate([s.pos.ravel(), s.vel.ravel()])


def gen_billiards(n: int, seed: int, dims: int = 2, T: int = 44, radius: float = 0.1,
                  speed_min: float = 0.05, speed_max: float = 0.15, substeps: int = 10,
                  pixels: bool = False) -> Dataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    if dims not in (1, 2):
        raise ValueError(f"dims must be 1 or 2, got {dims}")
    obs_dim = FRAME * FRAME if pixels else 2 * dims
    obs = np.zeros((n, T + 1, obs_dim), dtype=np.float32)
    states = np.zeros((n, T + 1, 4 * dims), dtype=np.float32)
    for i in range(n):
        traj = billiards_trajectory(item_rng(seed, i), dims, T, radius, speed_min, speed_max, substeps)
        for t, s in enumerate(traj):
            obs[i, t] = render_pixels(s).ravel() if pixels else s.pos.ravel()
            states[i, t] = state_vector(s)
    task = ("pixbill" if pixels else "bill") + f"{dims}d"
    params = {"T": T, "radius": radius, "speed_min": speed_min, "speed_max": speed_max, "substeps": substeps}
    return Dataset(task, obs, seed, params, states)


def generate(task: str, n: int, seed: int, **overrides) -> Dataset:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {', '.join(TASKS)}")
    params = dict(DEFAULTS[task])
    params.update({k: v for k, v in overrides.items() if v is not None})
    if task == "lines":
        return gen_lines(n, seed, **params)
    if task == "circles":
        return gen_circles(n, seed, **params)
    dims = 1 if task.endswith("1d") else 2
    return gen_billiards(n, seed, dims=dims, pixels=task.startswith("pix"), **params)


# --- file format -------------------------------------------------------------
#
# b"PCOD1\n", then UTF-8 "key=value\n" header lines, then an empty line, then
# the little-endian float32 observation block (n, T+1, obs_dim) in row-major
# order, then the optional state block (n, T+1, state_dim).

MAGIC = b"PCOD1\n"


def dumps(ds: Dataset) -> bytes:
    head = {
        "task": ds.task,
        "n": ds.n,
        "length": ds.length,
        "obs_dim": ds.obs_dim,
        "seed": ds.seed,
        "state_dim": 0 if ds.states is None else ds.states.shape[2],
    }
    for k, v in sorted(ds.params.items()):
        head[f"param.{k}"] = repr(v)
    buf = io.BytesIO()
    buf.write(MAGIC)
    for k, v in head.items():
        buf.write(f"{k}={v}\n".encode())
    buf.write(b"\n")
    buf.write(np.ascontiguousarray(ds.obs, dtype="<f4").tobytes())
    if ds.states is not None:
        buf.write(np.ascontiguousarray(ds.states, dtype="<f4").tobytes())
    return buf.getvalue()


def save_dataset(ds: Dataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(ds))


def loads(raw: bytes) -> Dataset:
    if not raw.startswith(MAGIC):
        raise DatasetFormatError("not a PCOD1 dataset (bad magic)")
    end = raw.find(b"\n\n", len(MAGIC) - 1)
    if end < 0:
        raise DatasetFormatError("truncated header")
    head = {}
    for line in raw[len(MAGIC):end].decode().splitlines():
        k, _, v = line.partition("=")
        head[k] = v
    try:
        n, length, obs_dim = int(head["n"]), int(head["length"]), int(head["obs_dim"])
        state_dim, seed, task = int(head["state_dim"]), int(head["seed"]), head["task"]
    except (KeyError, ValueError) as exc:
        raise DatasetFormatError(f"malformed header: {exc}") from exc
    params = {k[6:]: _parse_value(v) for k, v in head.items() if k.startswith("param.")}
    body = raw[end + 2:]
    n_obs = n * length * obs_dim * 4
    n_state = n * length * state_dim * 4
    if len(body) != n_obs + n_state:
        raise DatasetFormatError(f"payload size {len(body)} does not match header (expected {n_obs + n_state})")
    obs = np.frombuffer(body[:n_obs], dtype="<f4").reshape(n, length, obs_dim).astype(np.float32)
    states = None
    if state_dim:
        states = np.frombuffer(body[n_obs:], dtype="<f4").reshape(n, length, state_dim).astype(np.float32)
    return Dataset(task, obs, seed, params, states)


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        return loads(fh.read())


def _parse_value(v: str):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v
