"""Baseline correctors: NeurVec (MLP with a fixed rational activation) and a
Neural ODE surrogate trained on fine one-step transitions."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import Corpus
from .integrators import Grid, IntegrationError, StepScheme, Trajectory, increment, integrate, node_times
from .model import CorrectionMode, correct_trajectory
from .systems import System, get_system
from .tokenizer import Normalizer

RATIONAL_NUM = (0.0218, 0.5000, 1.5957, 1.1915)   # a0..a3
RATIONAL_DEN = (1.0000, 0.0000, 2.3830)           # b0..b2


def rational_activation(x):
    """``(a3 x^3 + a2 x^2 + a1 x + a0) / (b2 x^2 + b1 x + b0)``; works on floats, arrays and tensors."""
    a0, a1, a2, a3 = RATIONAL_NUM
    b0, b1, b2 = RATIONAL_DEN
    return (((a3 * x + a2) * x + a1) * x + a0) / ((b2 * x + b1) * x + b0)


class Rational(nn.Module):
    def forward(self, x):
        return rational_activation(x)


@dataclass(frozen=True)
class BaselineTrainConfig:
    lr: float = 1e-3
    batch_size: int = 500
    epochs: int = 100
    hidden: int = 1024
    step_size: int = 20       # StepLR period (Neural ODE)
    gamma: float = 0.5
    seed: int = 0


def _init_seeded(seed: int, build):
    state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        return build()
    finally:
        torch.random.set_rng_state(state)


def _minibatches(n: int, size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for i in range(0, n, size):
        yield perm[i:i + size]


class NeurVec(nn.Module):
    """State -> correction MLP, one hidden layer with the rational activation.

    Inputs and outputs live in normalised units; ``correction`` maps raw
    states to raw corrections.
    """

    kind = "neurvec"

    def __init__(self, dim: int, normalizer: Normalizer | None = None, hidden: int = 1024, seed: int = 0):
        super().__init__()
        self.dim = dim
        self.normalizer = normalizer or Normalizer.identity(dim)
        self.net = _init_seeded(seed, lambda: nn.Sequential(nn.Linear(dim, hidden), Rational(),
                                                            nn.Linear(hidden, dim))).double()

    def forward(self, x):
        return self.net(x)

    @torch.no_grad()
    def correction(self, states: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=float)
        if states.shape[-1] != self.dim:
            raise ValueError(f"NeurVec expects states of dimension {self.dim}, got {states.shape[-1]}")
        x = torch.as_tensor(self.normalizer.states(states))
        return self.normalizer.errors_inv(self.net(x).numpy())

    def zero_output(self) -> "NeurVec":
        nn.init.zeros_(self.net[2].weight)
        nn.init.zeros_(self.net[2].bias)
        return self


def residual_pairs(records) -> tuple[np.ndarray, np.ndarray]:
    """One-step residuals at fine nodes: ``u[j+1] - u[j] - S(f, u[j], kΔt)``."""
    xs, ys = [], []
    for r in records:
        nodes = np.concatenate([r.coarse[:1], r.fine_at_nodes()])
        src = nodes[:-1]
        t = node_times(len(src), r.stride, r.dt)
        xs.append(src)
        ys.append(nodes[1:] - src - increment(r.scheme, r.system, r.params, src, t, r.stride * r.dt))
    return np.concatenate(xs), np.concatenate(ys)


def train_neurvec(corpus: Corpus, normalizer: Normalizer | None = None,
                  cfg: BaselineTrainConfig = BaselineTrainConfig(),
                  target: str = "labels") -> tuple[NeurVec, list[float]]:
    """Fit state -> correction pairs with Adam and cosine annealing.

    ``target="labels"`` regresses the corpus labels on the stored coarse states
    (what teacher-forced evaluation applies).  ``target="residual"`` regresses
    one-step residuals on fine states, which is what the rollout recursion
    needs.
    """
    dim = corpus.records[0].coarse.shape[1]
    normalizer = normalizer or Normalizer.fit(corpus.records)
    if target == "labels":
        x = np.concatenate([r.coarse[:-1] for r in corpus.records])
        y = np.concatenate([r.errors for r in corpus.records])
    elif target == "residual":
        x, y = residual_pairs(corpus.records)
    else:
        raise ValueError(f"unknown NeurVec target {target!r}")
    X = torch.as_tensor(normalizer.states(x))
    Y = torch.as_tensor(normalizer.errors(y))
    model = NeurVec(dim, normalizer, cfg.hidden, cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.epochs)
    rng = np.random.default_rng(cfg.seed)
    history = []
    for _ in range(cfg.epochs):
        total = 0.0
        for idx in _minibatches(len(X), cfg.batch_size, rng):
            opt.zero_grad(set_to_none=True)
            lossv = torch.mean((model(X[idx]) - Y[idx]) ** 2)
            lossv.backward()
            opt.step()
            total += float(lossv.detach()) * len(idx)
        sched.step()
        history.append(total / len(X))
        if not math.isfinite(history[-1]):
            raise FloatingPointError("NeurVec training diverged")
    return model, history


def neurvec_rollout(model: NeurVec, system, params, ic, k: int, dt: float, n: int,
                    scheme=StepScheme.RK4) -> Trajectory:
    """``û[j+1] = û[j] + S(f, û[j], kΔt) + NeurVec(û[j])`` for ``n`` coarse steps."""
    sys_ = get_system(system)
    ic = np.asarray(ic, dtype=float)
    if ic.shape != (sys_.dim,) or model.dim != sys_.dim:
        raise ValueError(f"NeurVec of dim {model.dim} cannot roll out {sys_.name} (dim {sys_.dim})")
    template = Trajectory(sys_.name, dict(params), ic, dt, k, np.zeros((n + 1, sys_.dim)), StepScheme(scheme),
                          Grid.COARSE)
    template.states[0] = ic
    return correct_trajectory(template, None, CorrectionMode.ROLLOUT,
                              corrector=lambda hist, j: model.correction(hist[-1]))


def neurvec_corrector(model: NeurVec):
    """Teacher-forced evaluation: predicted labels from the stored coarse states."""
    def corr(demos, queries):
        return [model.correction(q.coarse[:-1]) for q in queries]
    return corr


class NeuralODE(nn.Module):
    """``f_θ(u)``: two Tanh hidden layers mapping state to du/dt (normalised units)."""

    kind = "neuralode"

    def __init__(self, dim: int, hidden: int = 1024, state_mean=None, state_scale=None, deriv_scale=None,
                 seed: int = 0):
        super().__init__()
        self.dim = dim
        self.state_mean = np.zeros(dim) if state_mean is None else np.asarray(state_mean, dtype=float)
        self.state_scale = np.ones(dim) if state_scale is None else np.asarray(state_scale, dtype=float)
        self.deriv_scale = np.ones(dim) if deriv_scale is None else np.asarray(deriv_scale, dtype=float)
        self.net = _init_seeded(seed, lambda: nn.Sequential(
            nn.Linear(dim, hidden), nn.Tanh(), nn.Linear(hidden, hidden), nn.Tanh(), nn.Linear(hidden, dim))).double()

    def forward(self, u: torch.Tensor) -> torch.Tensor:
        mean = torch.as_tensor(self.state_mean)
        scale = torch.as_tensor(self.state_scale)
        return self.net((u - mean) / scale) * torch.as_tensor(self.deriv_scale)

    def as_system(self, name: str = "neural_ode") -> System:
        def fn(u, t, p):
            with torch.no_grad():
                return self(torch.as_tensor(np.asarray(u, dtype=float))).numpy()
        return System(name=name, dim=self.dim, param_names=(), rhs=fn)


def _torch_step(f, u, h, scheme):
    if StepScheme(scheme) is StepScheme.EULER:
        return u + h * f(u)
    k1 = f(u)
    k2 = f(u + 0.5 * h * k1)
    k3 = f(u + 0.5 * h * k2)
    k4 = f(u + h * k3)
    return u + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def transition_pairs(system, param_sets, ics, dt: float, n_steps: int, scheme=StepScheme.RK4):
    """Fine one-step pairs ``(u_j, u_{j+1})`` from reference integration."""
    xs, ys = [], []
    for params, ic in zip(param_sets, ics):
        states, _ = integrate(system, params, ic, dt, 1, n_steps, scheme)
        xs.append(states[:-1])
        ys.append(states[1:])
    return np.concatenate(xs), np.concatenate(ys)


def train_neuralode(x: np.ndarray, y: np.ndarray, dt: float, cfg: BaselineTrainConfig = BaselineTrainConfig(),
                    scheme=StepScheme.RK4) -> tuple[NeuralODE, list[float]]:
    """Fit ``f_θ`` so one unrolled step of size ``dt`` maps ``x`` to ``y``.

    The loss compares finite-difference slopes ``(step(u) - u) / dt`` in
    units of the data's derivative spread, so it stays O(1) for tiny ``dt``.
    """
    dim = x.shape[1]
    slope = (y - x) / dt
    d_scale = slope.std(axis=0)
    d_scale[d_scale == 0] = 1.0
    s_scale = x.std(axis=0)
    s_scale[s_scale == 0] = 1.0
    model = NeuralODE(dim, cfg.hidden, x.mean(axis=0), s_scale, d_scale, cfg.seed)
    X, Y = torch.as_tensor(x), torch.as_tensor(y)
    w = torch.as_tensor(1.0 / (dt * d_scale))
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=cfg.step_size, gamma=cfg.gamma)
    rng = np.random.default_rng(cfg.seed)
    history = []
    for _ in range(cfg.epochs):
        total = 0.0
        for idx in _minibatches(len(X), cfg.batch_size, rng):
            opt.zero_grad(set_to_none=True)
            pred = _torch_step(model, X[idx], dt, scheme)
            lossv = torch.mean(((pred - Y[idx]) * w) ** 2)
            lossv.backward()
            opt.step()
            total += float(lossv.detach()) * len(idx)
        sched.step()
        history.append(total / len(X))
        if not math.isfinite(history[-1]):
            raise FloatingPointError("Neural ODE training diverged")
    return model, history


def neuralode_rollout(rhs: "NeuralODE | System", ic, k: int, dt: float, n: int, scheme=StepScheme.RK4,
                      params=None) -> np.ndarray:
    """Integrate the surrogate with the coarse step ``k * dt``; returns ``(n + 1, dim)`` states."""
    sys_ = rhs.as_system() if isinstance(rhs, NeuralODE) else rhs
    try:
        states, _ = integrate(sys_, params or {}, ic, dt, k, n, scheme)
    except IntegrationError:
        raise IntegrationError("surrogate rollout diverged", -1) from None
    return states


def neuralode_evaluator(model: NeuralODE):
    """Corrector-compatible wrapper: expresses the surrogate rollout as labels
    relative to the coarse solver so it can share the evaluation harness."""
    def corr(demos, queries):
        out = []
        for q in queries:
            states = neuralode_rollout(model, q.ic, q.stride, q.dt, q.n_coarse, q.scheme)
            out.append(states[1:] - q.coarse[1:])
        return out
    return corr


def save_baseline(path, model: "NeurVec | NeuralODE", extra: dict | None = None):
    meta = {"kind": model.kind, "dim": model.dim, "extra": extra or {}}
    if isinstance(model, NeurVec):
        meta["normalizer"] = model.normalizer.to_dict()
        meta["hidden"] = model.net[0].out_features
    else:
        meta["hidden"] = model.net[0].out_features
        meta["scales"] = {k: [float(v) for v in getattr(model, k)] for k in ("state_mean", "state_scale", "deriv_scale")}
    return save_checkpoint(path, {f"model/{k}": v for k, v in model.state_dict().items()}, meta)


def load_baseline(path):
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") == "neurvec":
        model = NeurVec(meta["dim"], Normalizer.from_dict(meta["normalizer"]), meta["hidden"])
    elif meta.get("kind") == "neuralode":
        model = NeuralODE(meta["dim"], meta["hidden"], **meta["scales"])
    else:
        raise ValueError(f"checkpoint holds a {meta.get('kind')!r}, not a baseline")
    model.load_state_dict({k[len("model/"):]: torch.as_tensor(v) for k, v in tensors.items()})
    return model, meta
