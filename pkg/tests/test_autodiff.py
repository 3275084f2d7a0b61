import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stlctrl import autodiff as ad
from stlctrl.autodiff import EvaluationError, Tape

from oracles import central_diff


def scalar_grad(fn, *xs):
    tape = Tape()
    vs = [tape.var(x) for x in xs]
    out = fn(*vs)
    return out.value, ad.grad(out, vs)


def test_leaky_relu_value_and_slope():
    v, (g,) = scalar_grad(lambda x: ad.leaky_relu(x), -2.0)
    assert v == pytest.approx(-0.02)
    assert g == pytest.approx(0.01)


def test_tanh_at_origin():
    v, (g,) = scalar_grad(ad.tanh, 0.0)
    assert v == 0.0 and g == 1.0


def test_max_tie_goes_to_first_argument():
    v, (ga, gb) = scalar_grad(ad.max2, 3.0, 3.0)
    assert v == 3.0
    assert (ga, gb) == (1.0, 0.0)
    _, (ga, gb) = scalar_grad(ad.min2, 3.0, 3.0)
    assert (ga, gb) == (1.0, 0.0)


def test_product_rule():
    _, (gx, gy) = scalar_grad(lambda x, y: x * y, 2.0, 3.0)
    assert (gx, gy) == (3.0, 2.0)


def test_tanh_derivative_closed_form():
    _, (g,) = scalar_grad(ad.tanh, 0.5)
    assert g == pytest.approx(1 - math.tanh(0.5) ** 2, rel=1e-15)


def test_softmax_agg_examples():
    tape = Tape()
    assert ad.softmax_agg([tape.var(5.0)], 3.0).value == pytest.approx(5.0)
    assert ad.softmax_agg([tape.var(0.0), tape.var(0.0)], 1.0).value == pytest.approx(math.log(2))
    xs = [tape.var(v) for v in (1.0, 2.0, 3.0)]
    assert abs(ad.softmax_agg(xs, 100.0).value - 3.0) < 1e-6
    assert abs(ad.softmin_agg(xs, 100.0).value - 1.0) < 1e-6


def test_softmax_agg_rejects_bad_input():
    with pytest.raises(ValueError):
        ad.softmax_agg([], 1.0)
    with pytest.raises(ValueError):
        ad.softmin_agg([Tape().var(1.0)], 0.0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.floats(0.1, 100))
def test_softmin_within_logsumexp_bound(xs, t):
    tape = Tape()
    v = ad.softmin_agg([tape.var(x) for x in xs], t).value
    n = len(xs)
    assert v <= min(xs) + 1e-9
    assert v >= min(xs) - math.log(n) / t - 1e-9
    assert v <= min(xs) + n * math.log(n) / t + 1e-9


def test_division_by_zero_reports_node():
    tape = Tape()
    x = tape.var(1.0)
    with pytest.raises(EvaluationError) as err:
        ad.div(x, tape.var(0.0))
    assert err.value.op == "div"


def test_log_of_non_positive():
    with pytest.raises(EvaluationError):
        ad.log(Tape().var(0.0))
    with pytest.raises(EvaluationError):
        ad.log(Tape().var(-1.0))


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_non_finite_values_are_errors():
    with pytest.raises(EvaluationError):
        ad.exp(Tape().var(1e6))


def test_backward_requires_root_on_tape():
    a, b = Tape(), Tape()
    x = a.var(1.0)
    with pytest.raises(ValueError):
        b.backward(x)
    with pytest.raises(ValueError):
        a.backward(a.var(np.ones(3)))


def test_mixed_tapes_rejected():
    with pytest.raises(ValueError):
        Tape().var(1.0) + Tape().var(2.0)


def test_broadcast_gradients_reduce_to_input_shape():
    tape = Tape()
    a = tape.var(np.ones((3, 1)))
    b = tape.var(np.arange(4.0))
    out = ad.vsum(a * b)
    ga, gb = ad.grad(out, [a, b])
    assert ga.shape == (3, 1) and np.all(ga == 6.0)
    assert gb.shape == (4,) and np.all(gb == 3.0)


def test_numpy_inputs_fall_back_to_plain_arrays():
    x = np.array([1.0, -2.0])
    assert isinstance(ad.tanh(x), np.ndarray)
    assert np.allclose(ad.reduce_agg(x, -1, "max"), 1.0)
    assert isinstance(ad.vsum(x), np.ndarray)


def test_hypot_origin_has_zero_subgradient():
    _, (ga, gb) = scalar_grad(ad.hypot, 0.0, 0.0)
    assert ga == 0.0 and gb == 0.0


def test_indexing_and_scatter_gradients():
    tape = Tape()
    x = tape.var(np.arange(6.0).reshape(2, 3))
    out = ad.vsum(x[:, [0, 0, 2]] * 2.0)
    (g,) = ad.grad(out, [x])
    assert np.array_equal(g, [[4, 0, 2], [4, 0, 2]])


def test_backward_is_deterministic():
    def run():
        tape = Tape()
        x = tape.var(np.linspace(-1, 1, 7))
        y = ad.reduce_agg(ad.tanh(x) * x, -1, "max", 5.0) + ad.vmean(ad.square(x))
        return ad.grad(y, [x])[0]
    assert np.array_equal(run(), run())


# --- randomized graphs against finite differences -----------------------------

UNARY = ("neg", "square", "tanh", "sigmoid", "exp", "log", "sqrt", "sin", "cos", "atan",
         "relu", "leaky")
BINARY = ("add", "sub", "mul", "div", "max2", "min2", "hypot")


class Graph:
    """Random expression over a few inputs, evaluable on a tape or on floats.

    Domain-restricted ops are wrapped so their argument stays in range.
    In float mode the distance of every kink argument from its kink is
    recorded so near-tie draws can be excluded.
    """

    def __init__(self, rng, n_inputs, n_nodes):
        self.n_inputs = n_inputs
        self.ops = []
        for k in range(n_nodes):
            pool = n_inputs + k
            if rng.random() < 0.5:
                self.ops.append((str(rng.choice(UNARY)), int(rng.integers(pool)), None))
            else:
                self.ops.append((str(rng.choice(BINARY)), int(rng.integers(pool)),
                                 int(rng.integers(pool))))

    def evaluate(self, xs, lib):
        vals = list(xs)
        kinks = []
        for op, i, j in self.ops:
            a = vals[i]
            b = vals[j] if j is not None else None
            vals.append(self._apply(op, a, b, lib, kinks))
        return vals[-1], kinks

    @staticmethod
    def _apply(op, a, b, lib, kinks):
        def raw(x):
            return float(x.value) if isinstance(x, ad.Var) else float(x)
        if op in ("max2", "min2"):
            kinks.append(abs(raw(a) - raw(b)))
        if op in ("relu", "leaky"):
            kinks.append(abs(raw(a)))
        if lib == "ad":
            squash = lambda x: ad.tanh(x) * 2.0  # noqa: E731
            pos = lambda x: ad.square(x) + 0.5   # noqa: E731
            table = {
                "neg": lambda: -a, "square": lambda: ad.square(squash(a)),
                "tanh": lambda: ad.tanh(a), "sigmoid": lambda: ad.sigmoid(a),
                "exp": lambda: ad.exp(squash(a)), "log": lambda: ad.log(pos(a)),
                "sqrt": lambda: ad.sqrt(pos(a)), "sin": lambda: ad.sin(a), "cos": lambda: ad.cos(a),
                "atan": lambda: ad.atan(a), "relu": lambda: ad.relu(a),
                "leaky": lambda: ad.leaky_relu(a, 0.1),
                "add": lambda: a + b, "sub": lambda: a - b, "mul": lambda: squash(a) * squash(b),
                "div": lambda: a / pos(b), "max2": lambda: ad.max2(a, b),
                "min2": lambda: ad.min2(a, b), "hypot": lambda: ad.hypot(a, pos(b)),
            }
        else:
            squash = lambda x: math.tanh(x) * 2.0  # noqa: E731
            pos = lambda x: x * x + 0.5            # noqa: E731
            table = {
                "neg": lambda: -a, "square": lambda: squash(a) ** 2, "tanh": lambda: math.tanh(a),
                "sigmoid": lambda: 1 / (1 + math.exp(-a)), "exp": lambda: math.exp(squash(a)),
                "log": lambda: math.log(pos(a)), "sqrt": lambda: math.sqrt(pos(a)),
                "sin": lambda: math.sin(a), "cos": lambda: math.cos(a), "atan": lambda: math.atan(a),
                "relu": lambda: max(a, 0.0), "leaky": lambda: max(0.1 * a, a),
                "add": lambda: a + b, "sub": lambda: a - b, "mul": lambda: squash(a) * squash(b),
                "div": lambda: a / pos(b), "max2": lambda: max(a, b), "min2": lambda: min(a, b),
                "hypot": lambda: math.hypot(a, pos(b)),
            }
        return table[op]()


def _check_graph(rng, n_nodes):
    while True:
        g = Graph(rng, 3, n_nodes)
        x = rng.normal(size=3)
        _, kinks = g.evaluate(x, "float")
        if not kinks or min(kinks) > 1e-4:
            break
    tape = Tape()
    vs = [tape.var(v) for v in x]
    out, _ = g.evaluate(vs, "ad")
    grads = np.array([gv for gv in ad.grad(out, vs)], dtype=float)
    fd = central_diff(lambda z: g.evaluate(z, "float")[0], x, h=1e-6)
    tol = np.maximum(1e-5, 1e-4 * np.abs(fd))
    assert np.all(np.abs(grads - fd) <= tol), (g.ops, grads, fd)


def test_random_20_node_graphs_match_finite_differences():
    rng = np.random.default_rng(7)
    for _ in range(30):
        _check_graph(rng, 20)


def test_100_random_deep_graphs_match_finite_differences():
    rng = np.random.default_rng(11)
    for _ in range(100):
        _check_graph(rng, int(rng.integers(2, 9)))


def test_vector_ops_match_finite_differences():
    rng = np.random.default_rng(3)
    W = rng.normal(size=(4, 3))
    x0 = rng.normal(size=(2, 4))

    def f_np(x):
        z = np.tanh(x @ W)
        return float(np.log(np.exp(5 * z).sum(axis=-1)).sum() / 5 + np.mean(z ** 2))

    tape = Tape()
    x = tape.var(x0)
    z = ad.tanh(ad.matmul(x, W))
    out = ad.vsum(ad.reduce_agg(z, -1, "max", 5.0)) + ad.vmean(ad.square(z))
    (g,) = ad.grad(out, [x])
    assert np.allclose(g, central_diff(f_np, x0), atol=1e-7)


@pytest.mark.parametrize("kind", ["max", "min"])
@pytest.mark.parametrize("reverse", [False, True])
def test_cumulative_agg_matches_repeated_reduction(kind, reverse):
    rng = np.random.default_rng(5)
    x0 = rng.normal(size=(3, 7))
    for temp in (math.inf, 4.0):
        tape = Tape()
        x = tape.var(x0)
        cum = ad.cumulative_agg(x, kind, temp, reverse=reverse)
        for j in range(7):
            sl = x0[:, j:] if reverse else x0[:, :j + 1]
            ref = ad.reduce_agg(sl, -1, kind, temp)
            assert np.allclose(cum.value[:, j], ref)
        if not math.isinf(temp):
            w = rng.normal(size=(3, 7))

            def f(z):
                return float(np.sum(w * ad.cumulative_agg(z, kind, temp, reverse=reverse)))
            (g,) = ad.grad(ad.vsum(cum * w), [x])
            assert np.allclose(g, central_diff(f, x0), atol=1e-6)


def test_masked_reduction_ignores_masked_entries():
    tape = Tape()
    x = tape.var(np.array([[1.0, 9.0, 2.0]]))
    out = ad.reduce_agg(x, -1, "max", mask=np.array([True, False, True]))
    assert out.value[0] == 2.0
    (g,) = ad.grad(ad.vsum(out), [x])
    assert np.array_equal(g, [[0, 0, 1]])
