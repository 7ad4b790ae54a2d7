"""ODE families, parameter boxes and behaviour regimes.

Every right-hand side is written for batched states: ``u`` has shape
``(..., dim)`` and parameter values may be floats or arrays that broadcast
against ``u[..., 0]``.  Second-order equations are stored in first-order form
with state ``(x, dx/dt)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

Params = Mapping[str, float]
RhsFn = Callable[[np.ndarray, float, Params], np.ndarray]


class SystemId(str, Enum):
    LOTKA_VOLTERRA = "lotka_volterra"
    VAN_DER_POL = "van_der_pol"
    DAMPED_OSCILLATOR = "damped_oscillator"
    LORENZ = "lorenz"
    FITZHUGH_NAGUMO = "fitzhugh_nagumo"
    FALLING_OBJECT = "falling_object"
    PENDULUM_GRAVITY = "pendulum_gravity"
    DRIVEN_DAMPED_PENDULUM = "driven_damped_pendulum"
    ROSSLER = "rossler"


class RegistryError(ValueError):
    pass


def _lotka_volterra(u, t, p):
    x, y = u[..., 0], u[..., 1]
    return np.stack([p["alpha"] * x - p["beta"] * x * y, p["delta"] * x * y - p["gamma"] * y], axis=-1)


def _van_der_pol(u, t, p):
    x, v = u[..., 0], u[..., 1]
    return np.stack([v, p["mu"] * (1.0 - x * x) * v - x], axis=-1)


def _damped_oscillator(u, t, p):
    x, v = u[..., 0], u[..., 1]
    w = p["omega"]
    return np.stack([v, -2.0 * p["zeta"] * w * v - w * w * x], axis=-1)


def _lorenz(u, t, p):
    x, y, z = u[..., 0], u[..., 1], u[..., 2]
    return np.stack([p["sigma"] * (y - x), x * (p["rho"] - z) - y, x * y - p["beta"] * z], axis=-1)


def _fitzhugh_nagumo(u, t, p):
    v, w = u[..., 0], u[..., 1]
    return np.stack([v - v ** 3 / 3.0 - w + p["I"], p["epsilon"] * (v + p["a"] - p["b"] * w)], axis=-1)


def _falling_object(u, t, p):
    v = u[..., 1]
    return np.stack([v, p["g"] - p["c"] * v], axis=-1)


def _pendulum_gravity(u, t, p):
    x, v = u[..., 0], u[..., 1]
    return np.stack([v, -(p["g"] / p["l"]) * np.sin(x) - p["b"] * v], axis=-1)


def _driven_damped_pendulum(u, t, p):
    th, v = u[..., 0], u[..., 1]
    forcing = p["A"] * np.cos(p["omega"] * t)
    return np.stack([v, -p["b"] * v - p["c"] * np.sin(th) + forcing], axis=-1)


def _rossler(u, t, p):
    x, y, z = u[..., 0], u[..., 1], u[..., 2]
    return np.stack([-y - z, x + p["a"] * y, p["b"] + z * (x - p["c"])], axis=-1)


_RHS: dict[str, tuple[RhsFn, bool]] = {
    "lotka_volterra": (_lotka_volterra, True),
    "van_der_pol": (_van_der_pol, True),
    "damped_oscillator": (_damped_oscillator, True),
    "lorenz": (_lorenz, True),
    "fitzhugh_nagumo": (_fitzhugh_nagumo, True),
    "falling_object": (_falling_object, True),
    "pendulum_gravity": (_pendulum_gravity, True),
    "driven_damped_pendulum": (_driven_damped_pendulum, False),
    "rossler": (_rossler, True),
}

Interval = tuple[float, float]


@dataclass(frozen=True)
class ParamRangeSet:
    """Closed per-parameter intervals, tagged ``pretrain``, ``test`` or ``regime``."""

    intervals: Mapping[str, Interval]
    tag: str = "test"

    def __post_init__(self):
        for name, (lo, hi) in self.intervals.items():
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise RegistryError(f"bad interval for {name!r}: [{lo}, {hi}]")

    def contains(self, params: Params) -> bool:
        return all(lo <= params[k] <= hi for k, (lo, hi) in self.intervals.items())


@dataclass(frozen=True)
class BehaviorRegime:
    name: str
    box: ParamRangeSet
    system: str = ""


@dataclass(frozen=True)
class System:
    """One ODE family.  Ad-hoc systems (tests, surrogate models) only need
    ``name``, ``dim``, ``param_names`` and ``rhs``."""

    name: str
    dim: int
    param_names: tuple[str, ...]
    rhs: RhsFn
    autonomous: bool = True
    stride: int = 1
    dt: float = 0.01
    ic_box: tuple[Interval, ...] = ()
    ranges: Mapping[str, ParamRangeSet] = field(default_factory=dict)
    regimes: Mapping[str, BehaviorRegime] = field(default_factory=dict)
    constants: Mapping[str, float] = field(default_factory=dict)
    scheme: str = "rk4"
    finetune_epochs: int | None = None

    def check_params(self, params: Params) -> None:
        names = set(params)
        expected = set(self.param_names)
        if names != expected:
            unknown = sorted(names - expected)
            missing = sorted(expected - names)
            raise KeyError(f"{self.name}: unknown params {unknown}, missing params {missing}")
        for k, v in params.items():
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{self.name}: parameter {k!r} is not finite")

    def __call__(self, state, t, params):
        return self.rhs(state, t, params)


def _registry_path() -> Path:
    return Path(str(resources.files("odecorrect") / "data" / "registry.json"))


def load_registry(path: str | Path | None = None) -> dict[str, System]:
    """Read the system registry (the bundled file by default)."""
    path = Path(path) if path is not None else _registry_path()
    if not path.exists():
        raise RegistryError(f"registry file not found: {path}")
    with open(path) as fh:
        doc = json.load(fh)
    constants = doc.get("constants", {})
    out = {}
    for rec in doc["systems"]:
        name = rec["id"]
        if name not in _RHS:
            raise RegistryError(f"registry lists unknown system {name!r}")
        rhs, autonomous = _RHS[name]
        ranges = {tag: ParamRangeSet({k: tuple(v) for k, v in box.items()}, tag)
                  for tag, box in rec.get("ranges", {}).items()}
        regimes = {rname: BehaviorRegime(rname, ParamRangeSet({k: tuple(v) for k, v in box.items()}, "regime"), name)
                   for rname, box in rec.get("regimes", {}).items()}
        params = tuple(rec["params"])
        out[name] = System(
            name=name,
            dim=int(rec["dim"]),
            param_names=params,
            rhs=rhs,
            autonomous=autonomous,
            stride=int(rec["stride"]),
            dt=float(rec["dt"]),
            ic_box=tuple(tuple(map(float, iv)) for iv in rec["ic"]),
            ranges=ranges,
            regimes=regimes,
            constants={k: float(v) for k, v in constants.items() if k in params},
            scheme=rec.get("scheme", "rk4"),
            finetune_epochs=rec.get("finetune_epochs"),
        )
        if len(out[name].ic_box) != out[name].dim:
            raise RegistryError(f"{name}: IC box has {len(out[name].ic_box)} entries for dim {out[name].dim}")
    return out


_DEFAULT_REGISTRY: dict[str, System] | None = None
_CUSTOM: dict[str, System] = {}


def get_system(system: str | SystemId | System) -> System:
    global _DEFAULT_REGISTRY
    if isinstance(system, System):
        return system
    if _DEFAULT_REGISTRY is None:
        _DEFAULT_REGISTRY = load_registry()
    key = system.value if isinstance(system, SystemId) else str(system)
    if key in _DEFAULT_REGISTRY:
        return _DEFAULT_REGISTRY[key]
    if key in _CUSTOM:
        return _CUSTOM[key]
    raise KeyError(f"unknown system {key!r}; known: {sorted(_DEFAULT_REGISTRY) + sorted(_CUSTOM)}")


def rhs(system, params: Params, state, t: float = 0.0) -> np.ndarray:
    """Evaluate du/dt for ``system`` at ``(state, t)``."""
    sys_ = get_system(system)
    sys_.check_params(params)
    state = np.asarray(state, dtype=float)
    if state.shape[-1] != sys_.dim:
        raise ValueError(f"{sys_.name}: state has {state.shape[-1]} components, expected {sys_.dim}")
    return sys_.rhs(state, t, params)


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _draw_box(sys_: System, box: ParamRangeSet, seed) -> dict[str, float]:
    rng = _rng(seed)
    out = {}
    # Sorted so that the draw order never depends on dict insertion order.
    for name in sorted(sys_.param_names):
        if name in box.intervals:
            lo, hi = box.intervals[name]
            out[name] = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
        elif name in sys_.constants:
            out[name] = sys_.constants[name]
        else:
            raise KeyError(f"{sys_.name}: no range or default for parameter {name!r}")
    return {k: out[k] for k in sys_.param_names}


def sample_params(system, ranges: ParamRangeSet | str, seed) -> dict[str, float]:
    """Draw every coefficient independently and uniformly from its interval.

    ``ranges`` may be a tag (``"pretrain"`` / ``"test"``) resolved against the
    registry.  Fixed constants such as ``g`` come from the registry defaults.
    """
    sys_ = get_system(system)
    if isinstance(ranges, str):
        if ranges not in sys_.ranges:
            raise KeyError(f"{sys_.name} has no {ranges!r} parameter ranges")
        ranges = sys_.ranges[ranges]
    unknown = set(ranges.intervals) - set(sys_.param_names)
    if unknown:
        raise KeyError(f"{sys_.name}: ranges given for unknown params {sorted(unknown)}")
    return _draw_box(sys_, ranges, seed)


def sample_initial_condition(system, seed) -> np.ndarray:
    sys_ = get_system(system)
    rng = _rng(seed)
    lo = np.array([iv[0] for iv in sys_.ic_box])
    hi = np.array([iv[1] for iv in sys_.ic_box])
    return lo + (hi - lo) * rng.random(sys_.dim)


def regime_params(system, regime: BehaviorRegime | str, seed) -> dict[str, float]:
    sys_ = get_system(system)
    if isinstance(regime, str):
        if regime not in sys_.regimes:
            raise KeyError(f"{sys_.name} has no regime {regime!r}; known: {sorted(sys_.regimes)}")
        regime = sys_.regimes[regime]
    if regime.system and regime.system != sys_.name:
        raise ValueError(f"regime {regime.name!r} belongs to {regime.system}, not {sys_.name}")
    return _draw_box(sys_, regime.box, seed)


def custom_system(name: str, dim: int, fn: Callable, param_names: Sequence[str] = (),
                  autonomous: bool = True) -> System:
    """Wrap ``fn(u, t, params)`` as a System for ad-hoc integration.

    The system is registered under ``name`` (replacing any earlier custom
    system of that name) so trajectories that refer to it by name resolve.
    """
    if name in _builtin_names():
        raise ValueError(f"{name!r} is a built-in system")
    sys_ = System(name=name, dim=dim, param_names=tuple(param_names), rhs=fn, autonomous=autonomous)
    _CUSTOM[name] = sys_
    return sys_


def _builtin_names() -> set[str]:
    get_system(SystemId.LORENZ)
    return set(_DEFAULT_REGISTRY)
