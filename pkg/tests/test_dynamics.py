import numpy as np
import pytest

from stlctrl import autodiff as ad
from stlctrl.autodiff import Tape
from stlctrl.dynamics import (Bicycle, ControlBounds, DisturbanceModel, Integrator,
                              rollout_openloop, sample_disturbance)

from oracles import bicycle_rk4, central_diff

BIKE = Bicycle()
ZERO = np.zeros(2)


def test_rest_is_a_fixed_point():
    x = np.array([1.0, 2.0, 0.3, 0.0])
    assert np.array_equal(BIKE.step(x, ZERO, ZERO), x)


def test_straight_line_motion():
    x1 = BIKE.step(np.array([0.0, 0.0, 0.0, 2.0]), ZERO, ZERO)
    assert x1 == pytest.approx([1.0, 0.0, 0.0, 2.0], abs=1e-12)


def test_speed_saturates_at_upper_bound():
    x1 = BIKE.step(np.array([0.0, 0.0, 0.0, 4.8]), np.array([3.0, 0.0]), ZERO)
    assert x1[3] == 5.0
    # reaches 5 after 1/15 s, then cruises
    expected_x = 4.8 / 15 + 0.5 * 3.0 / 15 ** 2 + 5.0 * (0.5 - 1 / 15)
    assert x1[0] == pytest.approx(expected_x, abs=1e-12)


def test_speed_saturates_at_zero():
    x1 = BIKE.step(np.array([0.0, 0.0, 0.0, 0.5]), np.array([-3.0, 0.0]), ZERO)
    assert x1[3] == 0.0
    assert x1[0] == pytest.approx(0.5 ** 2 / 6.0, abs=1e-12)


@pytest.mark.parametrize("x0,u,d", [
    ([0.0, 0.0, 0.0, 3.0], [0.0, 0.2], [0.0, 0.0]),
    ([1.0, -2.0, 1.2, 1.5], [2.0, -0.3], [0.1, 0.05]),
    ([0.0, 0.0, -0.4, 4.5], [3.0, 0.344], [0.2, -0.1]),
    ([0.0, 0.0, 2.0, 0.3], [-3.0, 0.1], [-0.1, 0.0]),
])
def test_step_matches_fine_rk4(x0, u, d):
    ours = BIKE.step(np.array(x0), np.array(u), np.array(d))
    ref = bicycle_rk4(x0, u, d, substeps=400)
    assert np.all(np.abs(ours - ref) <= 1e-4)


def test_step_matches_100_substep_rk4_for_turning_example():
    x0 = [0.0, 0.0, 0.0, 3.0]
    ours = BIKE.step(np.array(x0), np.array([0.0, 0.2]), ZERO)
    ref = bicycle_rk4(x0, [0.0, 0.2], [0.0, 0.0], substeps=100)
    assert np.all(np.abs(ours - ref) <= 1e-4)


def test_batched_step_equals_individual_steps():
    rng = np.random.default_rng(0)
    x = np.column_stack([rng.normal(size=(5, 3)), rng.uniform(0, 5, 5)])
    u = rng.uniform(-0.3, 0.3, (5, 2))
    d = rng.normal(scale=0.1, size=(5, 2))
    batched = BIKE.step(x, u, d)
    for i in range(5):
        assert np.allclose(batched[i], BIKE.step(x[i], u[i], d[i]), atol=1e-14)


def test_tape_step_matches_numpy_step():
    x = np.array([[0.5, 1.0, 1.0, 2.0]])
    u = np.array([[1.0, 0.1]])
    tape = Tape()
    out = BIKE.step(tape.var(x), tape.var(u), ZERO[None])
    assert np.allclose(out.value, BIKE.step(x, u, ZERO[None]), atol=1e-14)


def test_speed_bound_holds_over_random_rollouts():
    rng = np.random.default_rng(1)
    for _ in range(20):
        u = rng.uniform(BIKE.bounds.lower, BIKE.bounds.upper, (30, 2))
        d = rng.normal(scale=[0.5, 0.2], size=(30, 2))
        s = rollout_openloop(BIKE, [0, 0, 0, rng.uniform(0, 5)], u, d).states
        assert np.all((s[:, 3] >= 0) & (s[:, 3] <= 5))


def test_final_position_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    u0 = rng.uniform(-0.8, 0.8, (6, 2)) * [1.0, 0.3]
    x0 = np.array([0.0, 0.0, 0.5, 2.0])

    def final_xy(u):
        x = x0
        for t in range(len(u)):
            x = BIKE.step(x, u[t], ZERO)
        return x

    tape = Tape()
    u = tape.var(u0)
    x = tape.var(x0)
    for t in range(6):
        x = BIKE.step(x, u[t], ZERO)
    for k in (0, 1):
        (g,) = ad.grad(x[k], [u])
        fd = central_diff(lambda z: final_xy(z)[k], u0)
        assert np.allclose(g, fd, rtol=1e-4, atol=1e-8)


def test_rollout_lengths_and_repeatability():
    s = rollout_openloop(BIKE, [0, 0, 0, 1.0], np.zeros((0, 2)))
    assert s.states.shape == (1, 4)
    rest = rollout_openloop(BIKE, [1, 1, 0, 0], np.zeros((5, 2))).states
    assert np.all(rest == rest[0])
    rng = np.random.default_rng(3)
    u = rng.uniform(-0.3, 0.3, (10, 2))
    a = rollout_openloop(BIKE, [0, 0, 0, 1.0], u).states
    b = rollout_openloop(BIKE, [0, 0, 0, 1.0], u).states
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        rollout_openloop(BIKE, [0, 0, 0, 1.0], u, np.zeros((9, 2)))


def test_non_finite_inputs_rejected():
    with pytest.raises(ValueError):
        BIKE.step(np.array([np.nan, 0, 0, 1.0]), ZERO, ZERO)


def test_disturbance_sampling():
    zero = DisturbanceModel([0.3, -0.1], [0.0, 0.0])
    assert np.all(sample_disturbance(zero, 7, seed=1) == [0.3, -0.1])
    model = DisturbanceModel([0.0, 0.0], [0.02, 0.05])
    draws = sample_disturbance(model, 100_000, seed=2)
    sigma = np.sqrt(model.var)
    assert np.all(np.abs(draws.mean(axis=0)) <= 3 * sigma / np.sqrt(len(draws)))
    assert np.allclose(draws.var(axis=0), model.var, rtol=0.02)
    assert np.array_equal(sample_disturbance(model, 5, seed=9), sample_disturbance(model, 5, seed=9))
    with pytest.raises(ValueError):
        DisturbanceModel([0.0], [-1.0])


def test_control_bounds_validation():
    with pytest.raises(ValueError):
        ControlBounds([1.0], [1.0])
    b = ControlBounds([-3.0, -0.344], [3.0, 0.344])
    assert np.allclose(b.half_range, [3.0, 0.344])


def test_integrator():
    s = rollout_openloop(Integrator(), [0.0], [[0.5], [0.5]]).states
    assert s.ravel().tolist() == [0.0, 0.5, 1.0]
