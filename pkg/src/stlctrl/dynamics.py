"""Discrete-time systems: the kinematic bicycle and a toy integrator.

``step`` accepts either numpy arrays or tape Vars with a leading batch shape,
so the same code path serves plain simulation and differentiable rollouts.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .stl import Signal

__all__ = ["ControlBounds", "DisturbanceModel", "Bicycle", "Integrator",
           "sample_disturbance", "rollout_openloop", "BicycleState"]


def _is_var(*xs) -> bool:
    return any(isinstance(x, Var) for x in xs)


@dataclass(frozen=True)
class ControlBounds:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != hi.shape or not np.all(lo < hi):
            raise ValueError("control bounds need lower < upper componentwise")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def half_range(self) -> np.ndarray:
        return (self.upper - self.lower) / 2.0

    @property
    def midpoint(self) -> np.ndarray:
        return (self.upper + self.lower) / 2.0

    def clip(self, u):
        return np.clip(u, self.lower, self.upper)


@dataclass(frozen=True)
class DisturbanceModel:
    """Gaussian disturbance on the control channels, diagonal covariance."""
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        var = np.asarray(self.var, dtype=float)
        if mean.shape != var.shape:
            raise ValueError("mean and variance must have the same shape")
        if np.any(var < 0):
            raise ValueError("variances must be non-negative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def zero(self) -> "DisturbanceModel":
        return DisturbanceModel(self.mean, np.zeros_like(self.var))


def sample_disturbance(model: DisturbanceModel, T: int, seed=None, batch: tuple = ()) -> np.ndarray:
    """i.i.d. draws of shape ``batch + (T, dim)``; ``seed`` may be a Generator."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    z = rng.standard_normal(tuple(batch) + (T, model.dim))
    return model.mean + np.sqrt(model.var) * z


@dataclass(frozen=True)
class BicycleState:
    x: float
    y: float
    psi: float
    V: float

    def __post_init__(self):
        if not np.all(np.isfinite([self.x, self.y, self.psi, self.V])):
            raise ValueError("non-finite state")

    def array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.psi, self.V])


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(4)
_GL_NODES = (_GL_NODES + 1.0) / 2.0
_GL_WEIGHTS = _GL_WEIGHTS / 2.0


@dataclass(frozen=True)
class Bicycle:
    """Kinematic bicycle, state (x, y, psi, V), control (a, delta).

    Controls and disturbance are held over ``dt``.  Speed integrates
    ``a + d_a`` and saturates at 0 or ``v_max``; speed and heading are then
    known in closed form, and position is integrated by Gauss-Legendre
    quadrature on each side of the saturation instant.  The disturbance is
    ordered like the controls: (d_a, d_delta).
    """
    dt: float = 0.5
    lf: float = 0.5
    lr: float = 0.7
    v_max: float = 5.0
    bounds: ControlBounds = field(default_factory=lambda: ControlBounds([-3.0, -0.344], [3.0, 0.344]))

    state_dim = 4
    control_dim = 2
    state_names = ("x", "y", "psi", "V")

    def slip(self, delta):
        return ad.atan(ad.tan(delta) * (self.lr / (self.lr + self.lf)))

    def saturation_time(self, V0, accel):
        """Time within the step at which the speed reaches 0 or v_max (dt if never)."""
        acc = ad._val(accel)
        still = acc == 0
        target = np.where(acc > 0, self.v_max, 0.0)
        raw = (target - V0) / ad.where(still, 1.0, accel)
        return ad.where(still, self.dt, ad.clip(raw, 0.0, self.dt))

    def step(self, x, u, d=None):
        """One zero-order-hold step; shapes (..., 4), (..., 2), (..., 2)."""
        if not _is_var(x, u, d):
            if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
                raise ValueError("non-finite state or control")
        if d is None:
            accel, delta = u[..., 0], u[..., 1]
        else:
            accel, delta = u[..., 0] + d[..., 0], u[..., 1] + d[..., 1]
        px, py, psi, V = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
        beta = self.slip(delta)
        turn = ad.sin(beta) * (1.0 / self.lr)
        ts = self.saturation_time(V, accel)
        rest = self.dt - ts
        v_s = V + accel * ts
        psi_s = psi + turn * (V * ts + accel * ad.square(ts) * 0.5)

        def ex(v):
            return ad.stack([v], axis=-1) if isinstance(v, Var) else np.asarray(v)[..., None]

        # quadrature nodes: first on [0, ts], then on [ts, dt]
        tau_a = ex(ts) * _GL_NODES
        tau_b = ex(rest) * _GL_NODES
        v_nodes = ad.concat([ex(V) + ex(accel) * tau_a, ex(v_s) + np.zeros(_GL_NODES.size)], axis=-1)
        psi_nodes = ad.concat([ex(psi) + ex(turn) * (ex(V) * tau_a + ex(accel) * ad.square(tau_a) * 0.5),
                               ex(psi_s) + ex(turn * v_s) * tau_b], axis=-1)
        w = ad.concat([ex(ts) * _GL_WEIGHTS, ex(rest) * _GL_WEIGHTS], axis=-1)
        heading = psi_nodes + ex(beta)
        speed_w = v_nodes * w
        px = px + ad.vsum(speed_w * ad.cos(heading), axis=-1)
        py = py + ad.vsum(speed_w * ad.sin(heading), axis=-1)
        psi_new = psi_s + turn * v_s * rest
        v_new = ad.clip(v_s, 0.0, self.v_max)
        return ad.stack([px, py, psi_new, v_new], axis=-1)


@dataclass(frozen=True)
class Integrator:
    """x_{t+1} = x_t + dt * (u_t + d_t); a 1-D toy system for tests and demos."""
    dt: float = 1.0
    bounds: ControlBounds = field(default_factory=lambda: ControlBounds([-1.0], [1.0]))

    state_dim = 1
    control_dim = 1
    state_names = ("x",)

    def step(self, x, u, d=None):
        v = u if d is None else u + d
        return x + v * self.dt


def rollout_openloop(system, x0, controls, disturbances=None) -> Signal:
    """Simulate a fixed control sequence; returns a Signal of length T+1."""
    x = np.asarray(x0, dtype=float)
    controls = np.asarray(controls, dtype=float).reshape(-1, system.control_dim)
    T = controls.shape[0]
    if disturbances is None:
        disturbances = np.zeros_like(controls)
    disturbances = np.asarray(disturbances, dtype=float).reshape(-1, controls.shape[1])
    if disturbances.shape[0] != T:
        raise ValueError(f"got {T} controls but {disturbances.shape[0]} disturbances")
    states = [x]
    for t in range(T):
        x = system.step(x, controls[t], disturbances[t])
        states.append(x)
    return Signal(np.stack(states), dt=getattr(system, "dt", 1.0))
