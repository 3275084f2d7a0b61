"""Quantitative (robustness) and Boolean semantics over finite signals.

Traces are evaluated for every suffix at once, vectorised over any leading
batch dimensions.  Temporal windows are truncated at the final sample; a
window that starts past the end collapses to the final sample.  With
``temperature=inf`` every min/max is exact, otherwise it is replaced by the
log-sum-exp aggregate at that temperature.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tape, Var
from .formula import (Always, And, Eventually, Formula, Implies, Not, Or, Pred,
                      TrueF, Until, horizon)

__all__ = ["Signal", "RobustnessResult", "SignalTooShort", "trace", "robustness",
           "robustness_trace", "robustness_at", "boolean_sat", "boolean_trace"]


class SignalTooShort(ValueError):
    pass


@dataclass(frozen=True)
class Signal:
    """Uniformly sampled states, shape (T+1, n).  ``dt`` is informational."""
    states: np.ndarray
    dt: float = 1.0

    def __post_init__(self):
        s = np.array(self.states, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        if s.ndim != 2 or s.shape[0] == 0:
            raise ValueError(f"signal must be a non-empty (T+1, n) array, got shape {s.shape}")
        if not np.all(np.isfinite(s)):
            raise ValueError("signal contains non-finite entries")
        s.setflags(write=False)
        object.__setattr__(self, "states", s)

    def __len__(self):
        return self.states.shape[0]

    @property
    def last(self) -> int:
        return self.states.shape[0] - 1


@dataclass(frozen=True)
class RobustnessResult:
    value: Var
    satisfied: bool

    def __float__(self):
        return float(self.value.value)


@lru_cache(maxsize=256)
def _window(n: int, a: int, b: int | None):
    """Indices/mask of t' in [t+a, t+b] for every t, truncated at n-1."""
    span = (n - 1 if b is None else b) - a
    span = max(span, 0)
    k = np.arange(span + 1)
    idx = np.arange(n)[:, None] + a + k[None, :]
    mask = idx <= n - 1
    empty = ~mask.any(axis=1)
    mask[empty, 0] = True
    return np.minimum(idx, n - 1), mask


@lru_cache(maxsize=256)
def _until_index(n: int, a: int, b: int | None):
    """For Until: prefix offsets j and, per (t, k), the flat index of j=t'-t."""
    b_eff = n - 1 if b is None else b
    j = np.arange(b_eff + 1)
    pidx = np.minimum(np.arange(n)[:, None] + j[None, :], n - 1)
    pmask = np.arange(n)[:, None] + j[None, :] <= n - 1
    widx, wmask = _window(n, a, b)
    jsel = widx - np.arange(n)[:, None]
    flat = np.arange(n)[:, None] * (b_eff + 1) + jsel
    return pidx, pmask, widx, wmask, flat


def _pair(x: Var, y: Var, kind: str, temperature: float) -> Var:
    if math.isinf(temperature):
        return ad.max2(x, y) if kind == "max" else ad.min2(x, y)
    return ad.reduce_agg(ad.stack([x, y], axis=-1), -1, kind, temperature)


def trace(f: Formula, x: Var, temperature: float = math.inf) -> Var:
    """Robustness of ``f`` at every step; ``x`` has shape (..., T+1, n)."""
    n = x.shape[-2]
    if isinstance(f, TrueF):
        return x[..., 0] * 0.0 + f.rho_max
    if isinstance(f, Pred):
        return f.pred.mu(x) - f.pred.c
    if isinstance(f, Not):
        return -trace(f.child, x, temperature)
    if isinstance(f, And):
        return _pair(trace(f.left, x, temperature), trace(f.right, x, temperature), "min", temperature)
    if isinstance(f, Or):
        return _pair(trace(f.left, x, temperature), trace(f.right, x, temperature), "max", temperature)
    if isinstance(f, Implies):
        return _pair(-trace(f.left, x, temperature), trace(f.right, x, temperature), "max", temperature)
    if isinstance(f, (Eventually, Always)):
        kind = "max" if isinstance(f, Eventually) else "min"
        inner = trace(f.child, x, temperature)
        a, b = f.interval
        if b is None and a == 0:
            return ad.cumulative_agg(inner, kind, temperature, reverse=True)
        idx, mask = _window(n, a, b)
        return ad.reduce_agg(ad.gather_last(inner, idx), -1, kind, temperature, mask)
    if isinstance(f, Until):
        a, b = f.interval
        phi = trace(f.left, x, temperature)
        psi = trace(f.right, x, temperature)
        pidx, pmask, widx, wmask, flat = _until_index(n, a, b)
        run = ad.cumulative_agg(ad.gather_last(phi, pidx), "min", temperature, pmask)
        lead = run.shape[:-2]
        run_at = ad.gather_last(run.reshape(*lead, -1), flat)
        inner = _pair(ad.gather_last(psi, widx), run_at, "min", temperature)
        return ad.reduce_agg(inner, -1, "max", temperature, wmask)
    raise TypeError(f"not a formula: {f!r}")


def _as_var(s, tape: Tape | None):
    if isinstance(s, Var):
        return s
    states = s.states if isinstance(s, Signal) else np.asarray(s, dtype=float)
    if states.ndim == 1:
        states = states[:, None]
    return (tape or Tape()).var(states)


def _check_t(f: Formula, n: int, t: int):
    if not 0 <= t < n:
        raise SignalTooShort(f"step {t} outside signal of length {n}")
    if t + horizon(f) > n - 1:
        raise SignalTooShort(
            f"signal of length {n} too short for a definite verdict at step {t} "
            f"(horizon {horizon(f)})")


def robustness_at(f: Formula, x: Var, t: int = 0, temperature: float = math.inf) -> Var:
    """Robustness Var at step ``t`` for a (batched) state Var (..., T+1, n)."""
    _check_t(f, x.shape[-2], t)
    return trace(f, x, temperature)[..., t]


def robustness(f: Formula, s, t: int = 0, temperature: float = math.inf,
               tape: Tape | None = None) -> RobustnessResult:
    """Robustness of ``f`` on signal ``s`` at step ``t``.

    ``s`` may be a :class:`Signal`, an array or a tape Var of shape (T+1, n).
    The returned value lives on a tape, so gradients w.r.t. the states are
    available through ``value.tape.backward(value)``.
    """
    x = _as_var(s, tape)
    v = robustness_at(f, x, t, temperature)
    return RobustnessResult(v, bool(v.value >= 0))


def robustness_trace(f: Formula, s, temperature: float = math.inf) -> np.ndarray:
    """Per-step robustness values (end-truncated windows)."""
    x = _as_var(s, None)
    if x.shape[-2] == 0:
        raise SignalTooShort("empty signal")
    return trace(f, x, temperature).value


# --- Boolean semantics -------------------------------------------------------

def boolean_trace(f: Formula, states: np.ndarray) -> np.ndarray:
    """Satisfaction of ``f`` at every step of a single (T+1, n) signal."""
    states = states.states if isinstance(states, Signal) else np.asarray(states, dtype=float)
    n = states.shape[0]
    if isinstance(f, TrueF):
        return np.ones(n, dtype=bool)
    if isinstance(f, Pred):
        return f.pred.mu(Tape().var(states)).value > f.pred.c
    if isinstance(f, Not):
        return ~boolean_trace(f.child, states)
    if isinstance(f, And):
        return boolean_trace(f.left, states) & boolean_trace(f.right, states)
    if isinstance(f, Or):
        return boolean_trace(f.left, states) | boolean_trace(f.right, states)
    if isinstance(f, Implies):
        return ~boolean_trace(f.left, states) | boolean_trace(f.right, states)
    a, b = f.interval
    if isinstance(f, (Eventually, Always)):
        inner = boolean_trace(f.child, states)
        idx, mask = _window(n, a, b)
        vals = inner[idx]
        if isinstance(f, Eventually):
            return (vals & mask).any(axis=1)
        return (vals | ~mask).all(axis=1)
    if isinstance(f, Until):
        phi = boolean_trace(f.left, states)
        psi = boolean_trace(f.right, states)
        out = np.zeros(n, dtype=bool)
        idx, mask = _window(n, a, b)
        for t in range(n):
            for tp, ok in zip(idx[t], mask[t]):
                if ok and psi[tp] and phi[t:tp + 1].all():
                    out[t] = True
                    break
        return out
    raise TypeError(f"not a formula: {f!r}")


def boolean_sat(f: Formula, s, t: int = 0) -> bool:
    states = s.states if isinstance(s, Signal) else np.asarray(s, dtype=float)
    if states.ndim == 1:
        states = states[:, None]
    _check_t(f, states.shape[0], t)
    return bool(boolean_trace(f, states)[t])
