"""Recursive-descent parser for the STL text syntax.

Grammar, loosest binding first::

    implies := or ('->' implies)?                  right associative
    or      := and ('|' and)*
    and     := until ('&' until)*
    until   := unary ('until' interval? until)?    right associative
    unary   := ('!' | 'neg') unary
             | ('alw' | 'ev') interval? unary
             | atom
    atom    := '(' implies ')' | 'true' ('[' num ']')? | NAME (('<' | '>') num)?
    interval:= '[' int ',' (int | 'inf') ']'

Names resolve against a registry whose values are :class:`Predicate` objects,
formulas (inlined as macros) or bare ``mu`` callables.  ``name > c`` binds the
registered mu with threshold ``c``; ``name < c`` compiles to ``!(name > c)``.
"""
from __future__ import annotations

import re
from typing import Mapping

from .formula import (Always, And, Eventually, Formula, Implies, Not, Or, Pred,
                      Predicate, TrueF, Until, check_interval)

__all__ = ["STLSyntaxError", "parse"]


class STLSyntaxError(ValueError):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"{message} at line {line}, column {col}")
        self.line = line
        self.col = col


_ALIASES = {"neg": "!", "¬": "!", "∧": "&", "∨": "|", "⇒": "->", "→": "->",
            "□": "alw", "◊": "ev"}

_TOKEN = re.compile(r"""
    (?P<ws>\s+)
  | (?P<num>[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)
  | (?P<arrow>->|→|⇒)
  | (?P<name>[A-Za-z_][A-Za-z0-9_.]*)
  | (?P<sym>[()\[\],!&|<>¬∧∨□◊])
""", re.VERBOSE)


def _tokenize(text: str):
    pos, line, line_start = 0, 1, 0
    out = []
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise STLSyntaxError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        val = m.group()
        col = pos - line_start + 1
        if kind == "ws":
            nl = val.count("\n")
            if nl:
                line += nl
                line_start = pos + val.rfind("\n") + 1
        else:
            if kind in ("name", "sym", "arrow"):
                val = _ALIASES.get(val, val)
                kind = "op" if kind != "name" or val in ("!", "alw", "ev", "until", "true", "inf") else "name"
            out.append((kind, val, line, col))
        pos = m.end()
    out.append(("eof", "", line, pos - line_start + 1))
    return out


class _Parser:
    def __init__(self, text: str, registry: Mapping):
        self.toks = _tokenize(text)
        self.i = 0
        self.registry = registry

    def peek(self, val=None):
        tok = self.toks[self.i]
        return tok if val is None or tok[1] == val and tok[0] == "op" else None

    def take(self):
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def error(self, msg, tok=None):
        tok = tok or self.toks[self.i]
        return STLSyntaxError(msg, tok[2], tok[3])

    def expect(self, val):
        tok = self.take()
        if tok[0] != "op" or tok[1] != val:
            raise self.error(f"expected {val!r}, found {tok[1] or 'end of input'!r}", tok)
        return tok

    def number(self):
        tok = self.take()
        if tok[0] != "num":
            raise self.error(f"expected a number, found {tok[1] or 'end of input'!r}", tok)
        return float(tok[1])

    def parse(self) -> Formula:
        f = self.implies()
        if self.peek()[0] != "eof":
            raise self.error(f"unexpected token {self.peek()[1]!r}")
        return f

    def implies(self):
        left = self.disj()
        if self.peek("->"):
            self.take()
            return Implies(left, self.implies())
        return left

    def disj(self):
        left = self.conj()
        while self.peek("|"):
            self.take()
            left = Or(left, self.conj())
        return left

    def conj(self):
        left = self.until()
        while self.peek("&"):
            self.take()
            left = And(left, self.until())
        return left

    def until(self):
        left = self.unary()
        if self.peek("until"):
            self.take()
            iv = self.interval()
            return Until(left, self.until(), iv)
        return left

    def interval(self):
        if not self.peek("["):
            return None
        start = self.take()
        a = self.number()
        self.expect(",")
        if self.peek("inf"):
            self.take()
            b = None
        else:
            b = self.number()
        self.expect("]")
        try:
            return check_interval((a, b))
        except ValueError as exc:
            raise self.error(f"malformed interval: {exc}", start) from None

    def unary(self):
        if self.peek("!"):
            self.take()
            return Not(self.unary())
        for kw, cls in (("alw", Always), ("ev", Eventually)):
            if self.peek(kw):
                self.take()
                iv = self.interval()
                return cls(self.unary(), iv)
        return self.atom()

    def atom(self):
        tok = self.peek()
        if self.peek("("):
            self.take()
            f = self.implies()
            self.expect(")")
            return f
        if self.peek("true"):
            self.take()
            if self.peek("["):
                self.take()
                rho = self.number()
                self.expect("]")
                return TrueF(rho)
            return TrueF()
        if tok[0] != "name":
            raise self.error(f"expected a formula, found {tok[1] or 'end of input'!r}")
        self.take()
        name = tok[1]
        if name not in self.registry:
            raise self.error(f"unknown predicate {name!r}", tok)
        bound = self.registry[name]
        cmp = self.peek("<") or self.peek(">")
        if cmp:
            self.take()
            c = self.number()
            mu = bound.mu if isinstance(bound, Predicate) else bound
            if isinstance(mu, Formula) or not callable(mu):
                raise self.error(f"{name!r} is not a scalar predicate", tok)
            p = Pred(Predicate(name, mu, c))
            return p if cmp[1] == ">" else Not(p)
        if isinstance(bound, Formula):
            return bound
        if isinstance(bound, Predicate):
            return Pred(bound)
        return Pred(Predicate(name, bound, 0.0))


def parse(text: str, registry: Mapping | None = None) -> Formula:
    """Parse ``text`` into a formula, resolving names against ``registry``."""
    return _Parser(text, registry or {}).parse()
