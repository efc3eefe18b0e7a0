"""Experiment configs, the training loop, and table metrics."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .baselines import OdeRnnModel, RnnModel, rnn_pass, rnn_rollout
from .checkpoint import round_to_storage
from .nn import Adam
from .pcode import ConfigError, PcOdeModel, TrainConfig, rollout, select_epsilon, teacher_forced_pass
from .worlds import Dataset

log = logging.getLogger(__name__)

MODEL_KINDS = ("pcode", "rnn", "odernn")

PRESETS = {
    "desk": {"latent_dim": 64, "batch_size": 64, "steps": 2000, "gamma": 0.7, "decay_every": 250},
    "paper": {"latent_dim": 128, "batch_size": 256, "steps": 10_000},
}
PIXEL_PRESETS = {
    "desk": {"latent_dim": 128, "batch_size": 32, "steps": 2000, "gamma": 0.7, "decay_every": 250},
    "paper": {"latent_dim": 512, "batch_size": 256, "steps": 50_000},
}


class TrainingError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    task: str = "lines"
    model: str = "pcode"
    seed: int = 0
    latent_dim: int = 64
    hidden: int = 0                 # MLP width; 0 means latent_dim
    batch_size: int = 64
    steps: int = 2000
    lr: float = 1e-3
    gamma: float = 0.9
    decay_every: int = 5000
    dt_loss_scale: float = 1e-5
    bootstrap_prob: float = 0.01
    primer_len: int = 5
    epsilon: str = "inf"            # a number, or "from-baseline:<manifest path>"
    slope: float = 0.01
    substeps: int = 2
    eval_every: int = 250
    patience: int = 10
    holdout: float = 0.1
    decoded_inputs: bool = False
    normalize: bool = True
    clip_norm: float = 0.0          # 0 disables
    dt_head_lr_scale: float = 10.0
    eps_warmup: int = 0             # steps over which the tolerance tightens to its target
    eps_warmup_factor: float = 1000.0
    dataset: str = ""
    out: str = ""

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.model!r}")

    @classmethod
    def preset(cls, name: str, task: str, **overrides) -> "ExperimentConfig":
        table = PIXEL_PRESETS if task.startswith("pix") else PRESETS
        if name not in table:
            raise ConfigError(f"unknown preset {name!r}")
        values = dict(table[name])
        values.update(overrides)
        return cls(task=task, **values)

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in dataclasses.asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        return cls(**parse_config_text(text))

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


def parse_config_text(text: str) -> dict:
    """Typed values for the keys present in a key=value config text."""
    fields = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    values = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        key = key.strip()
        if not sep or key not in fields:
            raise ConfigError(f"bad config line {raw!r}")
        values[key] = _coerce(fields[key].type, val.strip())
    return values


def _fmt(v) -> str:
    return str(v).lower() if isinstance(v, bool) else str(v)


def _coerce(kind: str, val: str):
    if kind in ("int", int):
        return int(val)
    if kind in ("float", float):
        return float(val)
    if kind in ("bool", bool):
        if val.lower() not in ("true", "false", "1", "0"):
            raise ConfigError(f"not a boolean: {val!r}")
        return val.lower() in ("true", "1")
    return val


def resolve_epsilon(spec: str) -> tuple[float, str]:
    """Numeric tolerance plus a provenance string for the manifest."""
    spec = str(spec).strip()
    if spec.startswith("from-baseline:"):
        path = Path(spec.split(":", 1)[1])
        if not path.exists():
            raise ConfigError(f"baseline manifest {path} not found")
        manifest = json.loads(path.read_text())
        if manifest["config"]["model"] != "rnn":
            raise ConfigError(f"{path} is not an RNN baseline run")
        return select_epsilon(manifest.get("final_train_loss")), f"baseline:{manifest.get('run_id', path)}"
    try:
        eps = float(spec)
    except ValueError as exc:
        raise ConfigError(f"cannot read epsilon {spec!r}") from exc
    return eps, "explicit"


def build_model(cfg: ExperimentConfig, obs_dim: int):
    rng = np.random.default_rng([cfg.seed, 1])
    hidden = cfg.hidden or cfg.latent_dim
    if cfg.model == "pcode":
        return PcOdeModel(obs_dim, cfg.latent_dim, rng, hidden=hidden, slope=cfg.slope)
    if cfg.model == "rnn":
        return RnnModel(obs_dim, cfg.latent_dim, rng, hidden=hidden)
    return OdeRnnModel(obs_dim, cfg.latent_dim, rng, hidden=hidden, substeps=cfg.substeps)


def model_from_config(mcfg: dict):
    """Rebuild an (untrained) model from ``model.config()`` output."""
    kind = mcfg["kind"]
    rng = np.random.default_rng(0)
    if kind == "pcode":
        m = PcOdeModel(int(mcfg["obs_dim"]), int(mcfg["latent_dim"]), rng, hidden=int(mcfg["hidden"]),
                       slope=float(mcfg["slope"]))
    elif kind == "rnn":
        m = RnnModel(int(mcfg["obs_dim"]), int(mcfg["latent_dim"]), rng, hidden=int(mcfg["hidden"]))
    elif kind == "odernn":
        m = OdeRnnModel(int(mcfg["obs_dim"]), int(mcfg["latent_dim"]), rng, hidden=int(mcfg["hidden"]),
                        substeps=int(mcfg["substeps"]))
    else:
        raise ConfigError(f"unknown model kind {kind!r}")
    return m


def train_config(cfg: ExperimentConfig, epsilon: float) -> TrainConfig:
    return TrainConfig(epsilon=epsilon, dt_loss_scale=cfg.dt_loss_scale, bootstrap_prob=cfg.bootstrap_prob,
                       batch_size=cfg.batch_size, steps=cfg.steps, lr=cfg.lr, gamma=cfg.gamma,
                       decay_every=cfg.decay_every, primer_len=cfg.primer_len, decoded_inputs=cfg.decoded_inputs)


def forward_pass(model, batch: np.ndarray, tcfg: TrainConfig, rng: np.random.Generator):
    if model.kind == "pcode":
        return teacher_forced_pass(model, batch, tcfg, rng)
    return rnn_pass(model, batch)


def sample(model, primer: np.ndarray, horizon: int):
    if model.kind == "pcode":
        return rollout(model, primer, horizon)
    return rnn_rollout(model, primer, horizon)


def snapshot(model) -> list[np.ndarray]:
    return [p.data.copy() for p in model.parameters()]


def restore(model, params: list[np.ndarray]) -> None:
    for p, v in zip(model.parameters(), params):
        p.data[...] = v


@dataclass
class RunManifest:
    run_id: str
    config: dict
    epsilon: float
    epsilon_source: str
    loss_curve: list[float] = field(default_factory=list)
    dt_star_curve: list[float] = field(default_factory=list)
    val_curve: list[tuple[int, float]] = field(default_factory=list)
    final_train_loss: float = float("nan")
    best_step: int = 0
    stopped_step: int = 0
    metrics: dict = field(default_factory=dict)
    checkpoint: str = ""
    seconds: float = 0.0
    early_stopping: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=1, default=_json_default)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))


def _eval_loss(model, obs: np.ndarray, tcfg: TrainConfig, chunk: int = 256) -> float:
    total = 0.0
    tcfg = dataclasses.replace(tcfg, bootstrap_prob=0.0)
    with T.no_grad():
        for lo in range(0, len(obs), chunk):
            res = forward_pass(model, obs[lo:lo + chunk], tcfg, np.random.default_rng(0))
            total += float(res.item_loss_x.sum())
    return total / len(obs)


def warmup_epsilon(epsilon: float, step: int, cfg: ExperimentConfig) -> float:
    """Log-linear decay from ``epsilon * eps_warmup_factor`` at step 0 to ``epsilon`` at ``eps_warmup``."""
    frac = min(1.0, step / cfg.eps_warmup)
    return epsilon * cfg.eps_warmup_factor ** (1.0 - frac)


def train(cfg: ExperimentConfig, data: Dataset, epsilon: float | None = None, eps_source: str = "explicit",
          progress: bool = False):
    """Train one model; returns (model, manifest) with the best-validation weights loaded."""
    if epsilon is None:
        epsilon, eps_source = resolve_epsilon(cfg.epsilon)
    train_idx, test_idx = data.split(cfg.holdout)
    obs = data.obs.astype(np.float64)
    train_obs, test_obs = obs[train_idx], obs[test_idx]
    model = build_model(cfg, data.obs_dim)
    if cfg.normalize and data.obs_dim <= 64:
        # pixel frames are already in [0, 1]; per-pixel scaling would blow up rarely lit pixels
        model.scaler.fit(train_obs)
    if model.kind == "pcode":
        model.epsilon = epsilon
    tcfg = train_config(cfg, epsilon)
    scales = [cfg.dt_head_lr_scale if name.startswith("dt_head.") else 1.0 for name, _ in model.named_parameters()]
    opt = Adam(model.parameters(), lr=cfg.lr, gamma=cfg.gamma, decay_every=cfg.decay_every,
               clip_norm=cfg.clip_norm or None, lr_scales=scales)
    rng = np.random.default_rng([cfg.seed, 2])
    run_id = f"{cfg.task}-{cfg.model}-s{cfg.seed}-{cfg.digest()}"
    man = RunManifest(run_id, dataclasses.asdict(cfg), epsilon, eps_source,
                      early_stopping={"eval_every": cfg.eval_every, "patience": cfg.patience,
                                      "criterion": "held-out teacher-forced loss"})
    best = (math.inf, snapshot(model), 0)
    bad_evals = 0
    t0 = time.time()
    step = 0
    for step in range(1, cfg.steps + 1):
        idx = rng.choice(len(train_obs), size=min(cfg.batch_size, len(train_obs)), replace=False)
        step_cfg = tcfg
        if model.kind == "pcode" and step <= cfg.eps_warmup and math.isfinite(epsilon):
            step_cfg = dataclasses.replace(tcfg, epsilon=warmup_epsilon(epsilon, step, cfg))
        res = forward_pass(model, train_obs[idx], step_cfg, rng)
        loss = res.loss.item()
        if not math.isfinite(loss):
            raise TrainingError(f"{run_id}: non-finite loss {loss} at step {step}")
        model.zero_grad()
        res.loss.backward()
        opt.step()
        man.loss_curve.append(float(res.loss_x.item()))
        man.dt_star_curve.append(float(res.mean_dt_star))
        if step % cfg.eval_every == 0 or step == cfg.steps:
            val = _eval_loss(model, test_obs, tcfg)
            man.val_curve.append((step, val))
            if progress:
                log.info("%s step %d train %.3g val %.3g dt* %.2f", run_id, step, loss, val, res.mean_dt_star)
            if val < best[0]:
                best = (val, snapshot(model), step)
                bad_evals = 0
            else:
                bad_evals += 1
                if bad_evals >= cfg.patience:
                    break
    man.stopped_step = step
    restore(model, best[1])
    round_to_storage(model)     # metrics below then hold for the float32 checkpoint as well
    man.best_step = best[2]
    # loss of the selected weights on (up to 1000) training sequences; robust to late spikes
    man.final_train_loss = _eval_loss(model, train_obs[:1000], tcfg)
    man.seconds = time.time() - t0
    man.metrics = evaluate(model, test_obs, cfg.primer_len, epsilon)
    return model, man


def evaluate(model, test_obs: np.ndarray, primer_len: int, epsilon: float | None = None, chunk: int = 256) -> dict:
    """Table metrics on held-out sequences.

    test_mse: teacher-forced next-step loss. sample_mse: autoregressive error
    after a ``primer_len`` ground-truth primer, averaged over t >= primer_len.
    mean_dt: mean executed segment length in those samples.
    """
    test_obs = np.asarray(test_obs, dtype=np.float64)
    horizon = test_obs.shape[1] - 1
    eps = getattr(model, "epsilon", math.inf) if epsilon is None else epsilon
    tcfg = TrainConfig(epsilon=eps, bootstrap_prob=0.0)
    test_mse = _eval_loss(model, test_obs, tcfg, chunk) / horizon
    sq, durs, updates, nfe = [], [], 0, 0
    for lo in range(0, len(test_obs), chunk):
        part = test_obs[lo:lo + chunk]
        out = sample(model, part[:, :primer_len], horizon)
        err = (out.predictions[:, primer_len:] - part[:, primer_len:]) ** 2
        sq.append(err.mean(axis=(1, 2)))
        durs.extend(d for row in out.durations for d in row)
        updates += out.cell_updates
        nfe += getattr(out, "nfe", 0)
    return {
        "test_mse": test_mse,
        "sample_mse": float(np.concatenate(sq).mean()),
        "mean_dt": float(np.mean(durs)),
        "cell_updates": updates,
        "nfe": nfe,
        "n_test": len(test_obs),
    }
