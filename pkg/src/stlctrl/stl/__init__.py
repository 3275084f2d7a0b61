"""Signal Temporal Logic: syntax, parser and semantics."""
from .formula import (DEFAULT_RHO_MAX, UNBOUNDED, Always, And, Eventually, Formula,
                      Implies, Not, Or, Pred, Predicate, TrueF, Until, depth, horizon,
                      predicates, to_text)
from .parser import STLSyntaxError, parse
from .semantics import (RobustnessResult, Signal, SignalTooShort, boolean_sat,
                        boolean_trace, robustness, robustness_at, robustness_trace,
                        trace)
