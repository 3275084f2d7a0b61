"""STL abstract syntax.

Intervals are integer step counts ``(a, b)``; ``b is None`` means the
interval runs to the end of the signal.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

Interval = Tuple[int, Optional[int]]
UNBOUNDED: Interval = (0, None)

DEFAULT_RHO_MAX = 1e6


def check_interval(interval) -> Interval:
    if interval is None:
        return UNBOUNDED
    a, b = interval
    if int(a) != a or (b is not None and int(b) != b):
        raise ValueError(f"interval bounds must be integer steps, got {interval}")
    a = int(a)
    b = None if b is None else int(b)
    if a < 0:
        raise ValueError(f"interval start must be >= 0, got {interval}")
    if b is not None and b < a:
        raise ValueError(f"interval start exceeds end: [{a},{b}]")
    return (a, b)


@dataclass(frozen=True)
class Predicate:
    """Atomic proposition mu(x) > c.

    ``mu`` maps a state tape Var of shape (..., n) to shape (...).  Equality
    and hashing use the name and threshold only.
    """
    name: str
    mu: Callable = field(compare=False, repr=False)
    c: float = 0.0

    def shifted(self, c: float) -> "Predicate":
        return Predicate(self.name, self.mu, float(c))


class Formula:
    def __and__(self, other): return And(self, other)
    def __or__(self, other): return Or(self, other)
    def __invert__(self): return Not(self)
    def __rshift__(self, other): return Implies(self, other)

    def __str__(self):
        return to_text(self)


@dataclass(frozen=True, eq=True)
class TrueF(Formula):
    rho_max: float = DEFAULT_RHO_MAX

    def __post_init__(self):
        if not self.rho_max > 0:
            raise ValueError("rho_max must be positive")


@dataclass(frozen=True, eq=True)
class Pred(Formula):
    pred: Predicate


@dataclass(frozen=True, eq=True)
class Not(Formula):
    child: Formula


@dataclass(frozen=True, eq=True)
class And(Formula):
    left: Formula
    right: Formula


@dataclass(frozen=True, eq=True)
class Or(Formula):
    left: Formula
    right: Formula


@dataclass(frozen=True, eq=True)
class Implies(Formula):
    left: Formula
    right: Formula


@dataclass(frozen=True, eq=True)
class Eventually(Formula):
    child: Formula
    interval: Interval = UNBOUNDED

    def __post_init__(self):
        object.__setattr__(self, "interval", check_interval(self.interval))


@dataclass(frozen=True, eq=True)
class Always(Formula):
    child: Formula
    interval: Interval = UNBOUNDED

    def __post_init__(self):
        object.__setattr__(self, "interval", check_interval(self.interval))


@dataclass(frozen=True, eq=True)
class Until(Formula):
    left: Formula
    right: Formula
    interval: Interval = UNBOUNDED

    def __post_init__(self):
        object.__setattr__(self, "interval", check_interval(self.interval))


def horizon(f: Formula) -> int:
    """Future samples needed for a definite verdict.

    Unbounded operators are truncated at the signal end and contribute only
    their start offset.
    """
    if isinstance(f, (TrueF, Pred)):
        return 0
    if isinstance(f, Not):
        return horizon(f.child)
    if isinstance(f, (And, Or, Implies)):
        return max(horizon(f.left), horizon(f.right))
    a, b = f.interval
    reach = a if b is None else b
    if isinstance(f, Until):
        return reach + max(horizon(f.left), horizon(f.right))
    return reach + horizon(f.child)


def depth(f: Formula) -> int:
    if isinstance(f, (TrueF, Pred)):
        return 0
    if isinstance(f, (Not, Eventually, Always)):
        return 1 + depth(f.child)
    return 1 + max(depth(f.left), depth(f.right))


def predicates(f: Formula) -> set:
    if isinstance(f, Pred):
        return {f.pred.name}
    if isinstance(f, TrueF):
        return set()
    if isinstance(f, (Not, Eventually, Always)):
        return predicates(f.child)
    return predicates(f.left) | predicates(f.right)


def _fmt_num(x: float) -> str:
    return repr(float(x))


def _fmt_interval(iv: Interval) -> str:
    if iv == UNBOUNDED:
        return ""
    a, b = iv
    return f"[{a},{'inf' if b is None else b}]"


def to_text(f: Formula) -> str:
    """Fully parenthesised concrete syntax accepted by :func:`parse`."""
    if isinstance(f, TrueF):
        return "true" if f.rho_max == DEFAULT_RHO_MAX else f"true[{_fmt_num(f.rho_max)}]"
    if isinstance(f, Pred):
        return f"({f.pred.name} > {_fmt_num(f.pred.c)})"
    if isinstance(f, Not):
        return f"(! {to_text(f.child)})"
    if isinstance(f, And):
        return f"({to_text(f.left)} & {to_text(f.right)})"
    if isinstance(f, Or):
        return f"({to_text(f.left)} | {to_text(f.right)})"
    if isinstance(f, Implies):
        return f"({to_text(f.left)} -> {to_text(f.right)})"
    if isinstance(f, Eventually):
        return f"(ev{_fmt_interval(f.interval)} {to_text(f.child)})"
    if isinstance(f, Always):
        return f"(alw{_fmt_interval(f.interval)} {to_text(f.child)})"
    if isinstance(f, Until):
        return f"({to_text(f.left)} until{_fmt_interval(f.interval)} {to_text(f.right)})"
    raise TypeError(f"not a formula: {f!r}")
