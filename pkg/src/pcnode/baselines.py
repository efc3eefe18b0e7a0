"""Fixed-step baselines: a vanilla GRU sequence model and an ODE-RNN.

Both share the encoder/decoder layout of the piecewise model and tick once
per observation. The ODE-RNN additionally integrates a learned autonomous
latent ODE over each unit interval with fixed-substep RK4.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .nn import GruCell, Module, ObsScaler, ResidualMlp
from .pcode import _as_batch, _sum_terms
from .tensor import Tensor


class RnnModel(Module):
    kind = "rnn"

    def __init__(self, obs_dim: int, latent_dim: int, rng: np.random.Generator, hidden: int | None = None):
        hidden = hidden or latent_dim
        self.obs_dim = obs_dim
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.encoder = ResidualMlp(obs_dim, hidden, latent_dim, rng)
        self.core = GruCell(latent_dim, latent_dim, rng)
        self.decoder = ResidualMlp(latent_dim, hidden, obs_dim, rng)
        self.scaler = ObsScaler(obs_dim)

    def config(self) -> dict:
        return {"kind": self.kind, "obs_dim": self.obs_dim, "latent_dim": self.latent_dim, "hidden": self.hidden}

    def initial(self, batch: int) -> Tensor:
        return T.Tensor(np.zeros((batch, self.latent_dim)))

    def advance(self, h: Tensor) -> Tensor:
        """Latent state one time unit after the last cell update (constant for the RNN)."""
        return h

    def encode(self, x) -> Tensor:
        return self.encoder(self.scaler.normalize(T.as_tensor(x)))

    def decode(self, h) -> Tensor:
        return self.scaler.denormalize(self.decoder(T.as_tensor(h)))

    def update(self, h: Tensor, x) -> Tensor:
        return self.core(h, self.encode(x))


class OdeRnnModel(RnnModel):
    kind = "odernn"

    def __init__(self, obs_dim: int, latent_dim: int, rng: np.random.Generator,
                 hidden: int | None = None, substeps: int = 2):
        super().__init__(obs_dim, latent_dim, rng, hidden)
        self.substeps = substeps
        self.dynamics = ResidualMlp(latent_dim, self.hidden, latent_dim, rng)
        self.nfe = 0

    def config(self) -> dict:
        cfg = super().config()
        cfg["substeps"] = self.substeps
        return cfg

    def f(self, h: Tensor) -> Tensor:
        self.nfe += 1
        return self.dynamics(h)

    def advance(self, h: Tensor) -> Tensor:
        return ode_integrate(self.f, h, 1.0, self.substeps)


def ode_integrate(f_theta: Callable, h0, span: float, substeps: int):
    """Classical RK4 over ``substeps`` equal substeps of ``span``.

    Works on Tensors (differentiable) and on plain arrays.
    """
    if not span > 0:
        raise ValueError(f"ode_integrate: span must be positive, got {span}")
    if substeps < 1:
        raise ValueError(f"ode_integrate: substeps must be >= 1, got {substeps}")
    dt = span / substeps
    h = h0
    for _ in range(substeps):
        k1 = f_theta(h)
        k2 = f_theta(h + k1 * (dt / 2))
        k3 = f_theta(h + k2 * (dt / 2))
        k4 = f_theta(h + k3 * dt)
        h = h + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6)
    return h


@dataclass
class BaselinePass:
    loss: Tensor
    item_loss_x: np.ndarray
    cell_updates: int
    nfe: int

    @property
    def loss_x(self) -> Tensor:
        return self.loss

    @property
    def mean_dt_star(self) -> float:
        return 1.0


def rnn_pass(model: RnnModel, batch) -> BaselinePass:
    """Teacher-forced next-step loss summed over t=1..T; one cell update per observation."""
    x = _as_batch(batch)
    B, steps, _ = x.shape
    Tn = steps - 1
    if Tn < 1:
        raise ValueError("rnn_pass: sequences need at least two observations")
    nfe0 = getattr(model, "nfe", 0)
    h = model.update(model.initial(B), x[:, 0])
    updates = 1
    terms = []
    item = np.zeros(B)
    for t in range(1, steps):
        ha = model.advance(h)
        per_item = T.row_mse(model.decode(ha), x[:, t])
        terms.append(T.mean(per_item))
        item += per_item.data
        if t < Tn:
            h = model.update(ha, x[:, t])
            updates += 1
    loss = _sum_terms(terms)
    return BaselinePass(loss, item, updates, getattr(model, "nfe", 0) - nfe0)


odernn_pass = rnn_pass


@dataclass
class BaselineRollout:
    predictions: np.ndarray
    cell_updates: int
    nfe: int
    horizon: int

    @property
    def mean_dt(self) -> float:
        return 1.0

    @property
    def durations(self) -> list[list[int]]:
        per = self.cell_updates // self.predictions.shape[0]
        return [[1] * per for _ in range(self.predictions.shape[0])]


def rnn_rollout(model: RnnModel, primer, horizon: int) -> BaselineRollout:
    """Teacher inputs for the primer, own predictions afterwards, one update per step."""
    primer = np.asarray(primer, dtype=np.float64)
    if primer.ndim == 2:
        primer = primer[None]
    B, p, obs = primer.shape
    if p < 1:
        raise ValueError("rollout: primer must hold at least one observation")
    if horizon < p:
        raise ValueError(f"rollout: horizon {horizon} shorter than primer length {p}")
    nfe0 = getattr(model, "nfe", 0)
    preds = np.zeros((B, horizon + 1, obs))
    with T.no_grad():
        h = model.update(model.initial(B), primer[:, 0])
        preds[:, 0] = model.decode(h).data
        updates = B
        for t in range(1, horizon + 1):
            ha = model.advance(h)
            xhat = model.decode(ha)
            preds[:, t] = xhat.data
            if t == horizon:
                break
            h = model.update(ha, primer[:, t] if t < p else xhat)
            updates += B
    return BaselineRollout(preds, updates, getattr(model, "nfe", 0) - nfe0, horizon)


odernn_rollout = rnn_rollout
