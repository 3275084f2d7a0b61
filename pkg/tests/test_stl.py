import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stlctrl.autodiff import Tape
from stlctrl.stl import (Always, And, Eventually, Implies, Not, Or, Pred, Predicate,
                         STLSyntaxError, SignalTooShort, TrueF, Until, boolean_sat, horizon,
                         parse, robustness, robustness_trace, to_text)

from oracles import brute_rho, central_diff, coord, random_formula, random_signal

X = Predicate("x", coord(0))
Y = Predicate("y", coord(1))


def rho(f, s, t=0, temp=math.inf):
    return float(robustness(f, np.asarray(s, dtype=float), t, temp).value.value)


# --- parser ------------------------------------------------------------------

REG = {"obs": Predicate("obs", coord(0)), "cov": Predicate("cov", coord(1)),
       "goal": Predicate("goal", coord(2)), "x": X, "y": Y}


def test_parse_always_not():
    f = parse("alw (neg obs)", REG)
    assert f == Always(Not(Pred(REG["obs"])))


def test_parse_case_study_shape():
    f = parse("(ev alw[0,8] cov) until (ev goal)", REG)
    assert f == Until(Eventually(Always(Pred(REG["cov"]), (0, 8))), Eventually(Pred(REG["goal"])))


def test_parse_rejects_reversed_interval():
    with pytest.raises(STLSyntaxError):
        parse("ev[2,1] x", REG)
    with pytest.raises(STLSyntaxError):
        parse("ev[-1,2] x", REG)


def test_parse_unknown_name_and_position():
    with pytest.raises(STLSyntaxError, match="line 1"):
        parse("alw zz", REG)
    with pytest.raises(STLSyntaxError) as err:
        parse("x &\n  (y |", REG)
    assert err.value.line == 2


def test_precedence_and_associativity():
    f = parse("!x & ev y | x -> y -> x", REG)
    a = And(Not(Pred(X)), Eventually(Pred(Y)))
    assert f == Implies(Or(a, Pred(X)), Implies(Pred(Y), Pred(X)))


def test_comparison_sugar():
    assert parse("x > 2", REG) == Pred(X.shifted(2.0))
    assert parse("x < 2", REG) == Not(Pred(X.shifted(2.0)))


def test_true_with_rho_max():
    assert parse("true[10]", REG) == TrueF(10.0)


def test_round_trip_random_formulas():
    rng = np.random.default_rng(0)
    reg = {f"x{i}": coord(i) for i in range(3)}
    for _ in range(200):
        f = random_formula(rng, 4, 3)
        assert parse(to_text(f), reg) == f


# --- quantitative semantics --------------------------------------------------

def test_true_is_rho_max():
    assert rho(TrueF(10.0), [[0.0], [5.0]]) == 10.0


def test_predicate_margin():
    assert rho(Pred(X.shifted(2.0)), [[3.0]]) == 1.0


def test_always_eventually_on_short_signal():
    s = [[1.0], [2.0], [-0.5]]
    assert rho(Always(Pred(X)), s) == -0.5
    assert rho(Eventually(Pred(X)), s) == 2.0


def test_until_matches_hand_enumeration():
    s = np.array([[0.5, 0.0], [2.0, 0.5], [-1.0, 3.0], [4.0, 2.0]])
    f = Until(Pred(X), Pred(Y.shifted(1.0)), (0, 2))
    # t'=0: min(-1, 0.5); t'=1: min(-0.5, 0.5, 2); t'=2: min(2, 0.5, 2, -1)
    expected = max(min(-1.0, 0.5), min(-0.5, 0.5), min(2.0, -1.0))
    assert rho(f, s) == expected == brute_rho(f, s.tolist(), 0)


def test_trace_of_always_is_suffix_minimum():
    tr = robustness_trace(Always(Pred(X)), [[1.0], [2.0], [3.0]])
    assert tr.tolist() == [1.0, 2.0, 3.0]


def test_predicate_trace_is_pointwise():
    s = np.array([[1.0], [-2.0], [0.25]])
    assert robustness_trace(Pred(X.shifted(0.5)), s).tolist() == [0.5, -2.5, -0.25]


def test_empty_and_short_signals_raise():
    with pytest.raises((SignalTooShort, ValueError)):
        robustness_trace(Pred(X), np.zeros((0, 1)))
    with pytest.raises(SignalTooShort):
        robustness(Always(Pred(X), (0, 5)), np.zeros((3, 1)))
    with pytest.raises(SignalTooShort):
        robustness(Pred(X), np.zeros((3, 1)), t=3)


def test_horizon():
    assert horizon(Always(Eventually(Pred(X), (1, 3)), (0, 8))) == 11
    assert horizon(Until(Pred(X), Pred(Y), (2, None))) == 2


def test_boolean_examples():
    s = [[1.0], [2.0], [3.0]]
    assert boolean_sat(Always(Pred(X)), s)
    assert not boolean_sat(Eventually(Pred(X.shifted(5.0))), s)


def test_zero_robustness_counts_as_satisfied():
    res = robustness(Pred(X), np.array([[0.0]]))
    assert res.satisfied and float(res) == 0.0


def test_random_pairs_match_brute_force_oracle():
    rng = np.random.default_rng(1)
    for _ in range(500):
        s = random_signal(rng)
        f = random_formula(rng, 4, s.shape[1])
        tr = robustness_trace(f, s)
        for t in range(len(s)):
            assert tr[t] == pytest.approx(brute_rho(f, s.tolist(), t), abs=1e-12)


def test_boolean_soundness_on_random_pairs():
    rng = np.random.default_rng(2)
    checked = 0
    for _ in range(500):
        s = random_signal(rng)
        f = random_formula(rng, 4, s.shape[1])
        if horizon(f) > len(s) - 1:
            continue
        r = rho(f, s)
        if abs(r) > 1e-9:
            assert boolean_sat(f, s) == (r > 0)
            checked += 1
    assert checked > 200


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_negation_duality(seed):
    rng = np.random.default_rng(seed)
    s = random_signal(rng)
    f = random_formula(rng, 3, s.shape[1])
    assert np.array_equal(robustness_trace(Not(f), s), -robustness_trace(f, s))


def _shift_all(f, delta):
    """Tighten every atom by delta (thresholds flip sign under negation)."""
    if isinstance(f, Pred):
        return Pred(f.pred.shifted(f.pred.c + delta))
    if isinstance(f, TrueF):
        return f
    if isinstance(f, Not):
        return Not(_shift_all(f.child, -delta))
    if isinstance(f, (And, Or)):
        return type(f)(_shift_all(f.left, delta), _shift_all(f.right, delta))
    if isinstance(f, Implies):
        return Implies(_shift_all(f.left, -delta), _shift_all(f.right, delta))
    if isinstance(f, (Eventually, Always)):
        return type(f)(_shift_all(f.child, delta), f.interval)
    return Until(_shift_all(f.left, delta), _shift_all(f.right, delta), f.interval)


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 3.0))
def test_threshold_shift_is_monotone(seed, delta):
    rng = np.random.default_rng(seed)
    s = random_signal(rng)
    f = random_formula(rng, 3, s.shape[1])
    before = robustness_trace(f, s)
    after = robustness_trace(_shift_all(f, delta), s)
    assert np.all(after <= before + 1e-12)
    p = Pred(X)
    assert np.allclose(robustness_trace(Pred(X.shifted(delta)), s[:, :1]),
                       robustness_trace(p, s[:, :1]) - delta)


def width_bound(f, n, t):
    """Worst-case gap between smooth and exact robustness.

    Each log-sum-exp over k <= n entries is within log(k)/t of the exact
    extremum, and min/max are 1-Lipschitz in the sup norm, so the gaps add
    along the deepest aggregation chain.
    """
    w = math.log(max(n, 2)) / t
    pair = math.log(2) / t
    if isinstance(f, (Pred, TrueF)):
        return 0.0
    if isinstance(f, Not):
        return width_bound(f.child, n, t)
    if isinstance(f, (And, Or, Implies)):
        return max(width_bound(f.left, n, t), width_bound(f.right, n, t)) + pair
    if isinstance(f, (Eventually, Always)):
        return width_bound(f.child, n, t) + w
    return max(width_bound(f.left, n, t) + w, width_bound(f.right, n, t)) + pair + w


def test_smooth_mode_converges_within_width_bound():
    rng = np.random.default_rng(4)
    for _ in range(300):
        s = random_signal(rng)
        f = random_formula(rng, 4, s.shape[1])
        exact = robustness_trace(f, s)
        smooth3 = robustness_trace(f, s, 1e3)
        assert np.all(np.abs(smooth3 - exact) <= width_bound(f, len(s), 1e3) + 1e-12)
        assert np.all(np.abs(robustness_trace(f, s, 1e5) - exact) <= 1e-3)


def _near_kink(f, s, h=1e-6):
    """True if some entry has unequal one-sided slopes (a min/max tie)."""
    base = rho(f, s)
    for idx in np.ndindex(s.shape):
        up, dn = s.copy(), s.copy()
        up[idx] += h
        dn[idx] -= h
        if abs((rho(f, up) - base) - (base - rho(f, dn))) > 1e-3 * h:
            return True
    return False


def test_exact_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    done = 0
    while done < 60:
        s = random_signal(rng, max_len=8)
        f = random_formula(rng, 3, s.shape[1])
        if horizon(f) > len(s) - 1 or _near_kink(f, s):
            continue
        tape = Tape()
        x = tape.var(s)
        v = robustness(f, x).value
        g = tape.backward(v).of(x)
        fd = central_diff(lambda z: rho(f, z), s, h=1e-7)
        assert np.allclose(g, fd, atol=1e-5), (to_text(f), g, fd)
        done += 1


def test_gradient_reaches_signal_entries():
    s = np.array([[1.0], [3.0], [2.0]])
    tape = Tape()
    x = tape.var(s)
    v = robustness(Always(Pred(X)), x).value
    g = tape.backward(v).of(x)
    assert g.ravel().tolist() == [1.0, 0.0, 0.0]
