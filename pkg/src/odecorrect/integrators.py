"""Fixed-step explicit integration (Euler, RK4) on aligned fine/coarse grids."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Mapping

import numpy as np

from .systems import System, get_system


class StepScheme(str, Enum):
    EULER = "euler"
    RK4 = "rk4"


class Grid(str, Enum):
    FINE = "fine"
    COARSE = "coarse"


class IntegrationError(FloatingPointError):
    def __init__(self, message: str, step_index: int, trajectory: int | None = None):
        super().__init__(message)
        self.step_index = step_index
        self.trajectory = trajectory


@dataclass(frozen=True)
class IntegrationConfig:
    dt: float
    n_fine_steps: int
    stride: int
    scheme: StepScheme = StepScheme.RK4

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.stride < 1 or self.n_fine_steps < 1:
            raise ValueError("stride and n_fine_steps must be positive")
        if self.n_fine_steps % self.stride:
            raise ValueError(f"n_fine_steps={self.n_fine_steps} is not divisible by stride={self.stride}")
        object.__setattr__(self, "scheme", StepScheme(self.scheme))

    @property
    def n_coarse_steps(self) -> int:
        return self.n_fine_steps // self.stride

    @classmethod
    def for_system(cls, system, n_coarse: int = 100, stride: int | None = None,
                   scheme: StepScheme | str | None = None) -> "IntegrationConfig":
        """Registry defaults for ``system``; horizon given in coarse nodes."""
        sys_ = get_system(system)
        k = sys_.stride if stride is None else stride
        return cls(dt=sys_.dt, n_fine_steps=n_coarse * k, stride=k, scheme=scheme or sys_.scheme)


@dataclass(eq=False)
class Trajectory:
    """States on the grid ``t_j = j * stride * dt`` for ``j = 0..n``."""

    system: str
    params: Mapping[str, float]
    ic: np.ndarray
    dt: float
    stride: int
    states: np.ndarray
    scheme: StepScheme
    grid: Grid

    @property
    def dt_effective(self) -> float:
        return self.stride * self.dt

    @property
    def times(self) -> np.ndarray:
        return (np.arange(len(self.states)) * self.stride) * self.dt

    @property
    def n_steps(self) -> int:
        return len(self.states) - 1


def node_times(n_nodes: int, stride: int, dt: float) -> np.ndarray:
    # index * dt, never accumulated, so coarse node j and fine node j*k coincide exactly
    return (np.arange(n_nodes) * stride) * dt


def step(scheme, system, params, state, t, h: float) -> np.ndarray:
    """One explicit step of size ``h`` from ``state`` at time ``t``.

    ``state`` may be batched with shape ``(..., dim)``; ``t`` a scalar or an
    array broadcasting against ``state[..., 0]``.
    """
    f = get_system(system).rhs
    u = np.asarray(state, dtype=float)
    if StepScheme(scheme) is StepScheme.EULER:
        return u + h * f(u, t, params)
    half = 0.5 * h
    t = np.asarray(t, dtype=float)
    k1 = f(u, t, params)
    k2 = f(u + half * k1, t + half, params)
    k3 = f(u + half * k2, t + half, params)
    k4 = f(u + h * k3, t + h, params)
    return u + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def increment(scheme, system, params, state, t, h: float) -> np.ndarray:
    """The scheme's update S(f, u, h), i.e. ``step(...) - state``."""
    u = np.asarray(state, dtype=float)
    return step(scheme, system, params, u, t, h) - u


def integrate(system, params, ic, dt: float, stride: int, n_steps: int, scheme,
              *, raise_on_failure: bool = True):
    """Batched fixed-step integration.

    ``ic`` has shape ``(dim,)`` or ``(batch, dim)``.  Returns
    ``(states, failed_at)`` where ``states`` has shape ``(..., n_steps + 1, dim)``
    and ``failed_at`` gives the first non-finite step per trajectory (-1 if none).
    """
    sys_ = get_system(system)
    u = np.array(ic, dtype=float)
    single = u.ndim == 1
    u = np.atleast_2d(u)
    if u.shape[-1] != sys_.dim:
        raise ValueError(f"{sys_.name}: IC has {u.shape[-1]} components, expected {sys_.dim}")
    h = stride * dt
    out = np.empty((u.shape[0], n_steps + 1, sys_.dim))
    out[:, 0] = u
    failed_at = np.full(u.shape[0], -1)
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(n_steps):
            u = step(scheme, sys_, params, u, (j * stride) * dt, h)
            out[:, j + 1] = u
            if not np.isfinite(u).all():
                bad = ~np.isfinite(u).all(axis=-1) & (failed_at < 0)
                failed_at[bad] = j + 1
                if raise_on_failure:
                    i = int(np.flatnonzero(bad)[0])
                    raise IntegrationError(f"{sys_.name}: non-finite state at step {j + 1}", j + 1, i)
                u = np.where(np.isfinite(u), u, 0.0)
    if single:
        return out[0], failed_at[0]
    return out, failed_at


def simulate(system, params, ic, config: IntegrationConfig, grid=Grid.FINE) -> Trajectory:
    sys_ = get_system(system)
    sys_.check_params(params)
    grid = Grid(grid)
    stride = 1 if grid is Grid.FINE else config.stride
    n = config.n_fine_steps if grid is Grid.FINE else config.n_coarse_steps
    states, _ = integrate(sys_, params, ic, config.dt, stride, n, config.scheme)
    return Trajectory(sys_.name, dict(params), np.array(ic, dtype=float), config.dt, stride, states,
                      config.scheme, grid)


def simulate_batch(system, params, ics, config: IntegrationConfig, grid=Grid.FINE):
    """Vectorised ``simulate`` for many ICs sharing ``params``.

    Returns ``(trajectories, failed)``; trajectories that blew up are ``None``
    and their indices are listed in ``failed``.
    """
    sys_ = get_system(system)
    sys_.check_params(params)
    grid = Grid(grid)
    stride = 1 if grid is Grid.FINE else config.stride
    n = config.n_fine_steps if grid is Grid.FINE else config.n_coarse_steps
    ics = np.asarray(ics, dtype=float)
    states, failed_at = integrate(sys_, params, ics, config.dt, stride, n, config.scheme,
                                  raise_on_failure=False)
    trajs = []
    for i in range(len(ics)):
        if failed_at[i] >= 0:
            trajs.append(None)
        else:
            trajs.append(Trajectory(sys_.name, dict(params), ics[i].copy(), config.dt, stride, states[i],
                                    config.scheme, grid))
    return trajs, [int(i) for i in np.flatnonzero(failed_at >= 0)]


def measured_order(scheme, system, params, ic, exact, t_end: float, h0: float, levels: int = 4):
    """Least-squares slope of log(error) against log(h), h = h0, h0/2, ...

    ``exact(t)`` is the closed-form solution.  Returns ``float('inf')`` when
    every error is exactly zero (the scheme is exact on this problem).
    """
    errs, hs = [], []
    for i in range(levels):
        h = h0 / 2 ** i
        n = int(round(t_end / h))
        states, _ = integrate(system, params, ic, h, 1, n, scheme)
        errs.append(float(np.max(np.abs(states[-1] - exact(n * h)))))
        hs.append(h)
    errs = np.array(errs)
    if np.all(errs == 0.0):
        return float("inf")
    if np.any(errs == 0.0):
        raise ValueError("some but not all errors are zero; increase h0")
    slope, _ = np.polyfit(np.log(hs), np.log(errs), 1)
    return float(slope)
