"""Fixed network components: affine maps, residual MLPs, a GRU cell and Adam."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class Module:
    """Anything that owns named parameters."""

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for name, val in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(val, Tensor) and val.requires_grad:
                out.append((key, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(key + "."))
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{key}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = np.sqrt(1.0 / fan_in)
    return T.parameter(rng.uniform(-bound, bound, size=shape))


class ObsScaler:
    """Fixed per-feature affine standardization of observations (not trained)."""

    def __init__(self, dim: int):
        self.mean = np.zeros(dim)
        self.std = np.ones(dim)

    def fit(self, obs: np.ndarray, floor: float = 1e-2) -> None:
        flat = np.asarray(obs, dtype=np.float64).reshape(-1, obs.shape[-1])
        self.mean = flat.mean(axis=0)
        self.std = np.maximum(flat.std(axis=0), floor)

    def normalize(self, x: Tensor) -> Tensor:
        return T.mul(T.sub(x, self.mean), 1.0 / self.std)

    def denormalize(self, y: Tensor) -> Tensor:
        return T.add(T.mul(y, self.std), self.mean)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = _uniform(rng, (in_dim, out_dim), in_dim)
        self.bias = _uniform(rng, (out_dim,), in_dim)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError("linear", x.shape, self.weight.shape)
        return T.add(T.matmul(x, self.weight), self.bias)


class ResidualMlp(Module):
    """Affine in, ``blocks`` residual ReLU layers at the hidden width, affine out.

    With the default two blocks this is four weight layers deep.
    """

    def __init__(self, in_dim: int, hidden: int, out_dim: int, rng: np.random.Generator, blocks: int = 2):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.inp = Linear(in_dim, hidden, rng)
        self.blocks = [Linear(hidden, hidden, rng) for _ in range(blocks)]
        self.out = Linear(hidden, out_dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError("mlp_forward", x.shape, (self.in_dim,))
        h = self.inp(x)
        for blk in self.blocks:
            h = T.add(T.relu(blk(h)), h)
        return self.out(h)


def mlp_forward(net: ResidualMlp, x: Tensor) -> Tensor:
    return net(x)


class GruCell(Module):
    """Gated recurrent unit with fused gate matrices.

    Gate column order is (reset, update, candidate); the candidate sees
    ``reset * (h @ U_c)`` as in the cuDNN formulation.
    """

    def __init__(self, input_dim: int, state_dim: int, rng: np.random.Generator):
        self.input_dim = input_dim
        self.state_dim = state_dim
        self.w_in = _uniform(rng, (input_dim, 3 * state_dim), input_dim)
        self.w_state = _uniform(rng, (state_dim, 3 * state_dim), state_dim)
        self.bias = T.parameter(np.zeros(3 * state_dim))

    def __call__(self, state: Tensor, x: Tensor) -> Tensor:
        n = self.state_dim
        if state.ndim != 2 or state.shape[1] != n:
            raise ShapeError("gru_step state", state.shape, (state.shape[0], n))
        if x.ndim != 2 or x.shape[1] != self.input_dim or x.shape[0] != state.shape[0]:
            raise ShapeError("gru_step input", x.shape, (state.shape[0], self.input_dim))
        gx = T.add(T.matmul(x, self.w_in), self.bias)
        gh = T.matmul(state, self.w_state)
        reset = T.sigmoid(T.add(gx[:, :n], gh[:, :n]))
        update = T.sigmoid(T.add(gx[:, n:2 * n], gh[:, n:2 * n]))
        cand = T.tanh(T.add(gx[:, 2 * n:], T.mul(reset, gh[:, 2 * n:])))
        return T.add(cand, T.mul(update, T.sub(state, cand)))


def gru_step(cell: GruCell, state: Tensor, x: Tensor) -> Tensor:
    return cell(state, x)


class MissingGradError(RuntimeError):
    pass


@dataclass
class Adam:
    params: list[Tensor]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    gamma: float = 0.9
    decay_every: int = 5000
    clip_norm: float | None = None
    lr_scales: list[float] | None = None
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.base_lr = self.lr
        if self.lr_scales is None:
            self.lr_scales = [1.0] * len(self.params)
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in self.params]
            self.v = [np.zeros_like(p.data) for p in self.params]

    def current_lr(self) -> float:
        """Learning rate the next step will use."""
        return self.base_lr * self.gamma ** (self.step_count // self.decay_every)

    def step(self) -> None:
        missing = [i for i, p in enumerate(self.params) if p.grad is None]
        if missing:
            raise MissingGradError(f"adam_step: {len(missing)} parameter(s) have no grad (first index {missing[0]})")
        grads = [p.grad for p in self.params]
        if self.clip_norm is not None:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if norm > self.clip_norm:
                grads = [g * (self.clip_norm / norm) for g in grads]
        self.lr = self.current_lr()
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, g, m, v, scale in zip(self.params, grads, self.m, self.v, self.lr_scales):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= scale * self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def adam_step(opt: Adam) -> None:
    opt.step()
