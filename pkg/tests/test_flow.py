import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lcumini import flow
from lcumini.tensor import Tensor, ShapeError, finite_diff_check


def test_timestep_reproducible_and_bounded():
    a = [flow.sample_timestep(np.random.default_rng(5)) for _ in range(3)]
    assert a[0] == a[1] == a[2]
    rng = np.random.default_rng(0)
    draws = np.array([flow.sample_timestep(rng) for _ in range(100_000)])
    assert draws.min() >= 0.0 and draws.max() <= 1.0
    # CLT: sd of the mean is 1/sqrt(12 * 1e5) ~ 9e-4, so 0.01 is > 10 sigma
    assert abs(draws.mean() - 0.5) < 0.01


def test_interpolation_endpoints_exact():
    rng = np.random.default_rng(1)
    x0, x1 = rng.standard_normal((3, 4, 4)), rng.random((3, 4, 4))
    assert np.array_equal(flow.interpolate(x0, x1, 0.0), x0)
    assert np.array_equal(flow.interpolate(x0, x1, 1.0), x1)
    assert np.all(flow.interpolate(np.zeros(3), np.full(3, 2.0), 0.5) == 1.0)


def test_interpolation_errors():
    with pytest.raises(ShapeError):
        flow.interpolate(np.zeros(2), np.zeros(3), 0.5)
    with pytest.raises(ValueError):
        flow.interpolate(np.zeros(2), np.zeros(2), 1.5)


def test_velocity_values():
    assert np.all(flow.velocity_target(np.ones(4), np.ones(4)) == 0)
    assert np.all(flow.velocity_target(np.zeros(4), np.ones(4)) == 1)
    with pytest.raises(ShapeError):
        flow.velocity_target(np.zeros(2), np.zeros(3))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 0.99))
def test_velocity_is_time_derivative(seed, t):
    rng = np.random.default_rng(seed)
    x0, x1 = rng.standard_normal(20), rng.random(20)
    h = 1e-6
    numeric = (flow.interpolate(x0, x1, t + h) - flow.interpolate(x0, x1, t - h)) / (2 * h)
    np.testing.assert_allclose(numeric, flow.velocity_target(x0, x1), atol=1e-6)


def test_flow_state_invariant():
    st_ = flow.make_flow_state(np.random.default_rng(0).random((3, 4, 4)), 0.3, np.random.default_rng(1))
    np.testing.assert_allclose(st_.xt, 0.7 * st_.x0 + 0.3 * st_.x1, atol=1e-6)


def _t(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def test_loss_zero_when_equal():
    u = [np.ones((3, 2, 2)), np.zeros((3, 2, 2))]
    lb = flow.compute_loss([_t(x) for x in u], u, 1)
    assert lb.values() == (0.0, 0.0, 0.0)


def test_loss_ref_zero_for_zero_ref():
    lb = flow.compute_loss([_t(np.ones((3, 2, 2)))], [np.zeros((3, 2, 2))], 0)
    assert float(lb.ref) == 0.0
    assert float(lb.total) == float(lb.tar) == 1.0


def test_loss_hand_example():
    # ref CU error 1 per element -> MSE 1; target error 2 per element -> MSE 4
    u = [np.zeros((3, 2, 2)), np.zeros((3, 2, 2))]
    v = [_t(np.ones((3, 2, 2))), _t(np.full((3, 2, 2), 2.0))]
    assert flow.compute_loss(v, u, 1).values() == (5.0, 1.0, 4.0)


def test_loss_misaligned():
    with pytest.raises(ShapeError):
        flow.compute_loss([_t(np.zeros(2))], [np.zeros(2), np.zeros(2)], 1)
    with pytest.raises(ValueError):
        flow.compute_loss([_t(np.zeros(2)), _t(np.zeros(2))], [np.zeros(2), np.zeros(2)], 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 4))
def test_loss_additivity_and_degeneracy(seed, n):
    rng = np.random.default_rng(seed)
    v = [_t(rng.standard_normal((3, 4, 4))) for _ in range(n)]
    u = [rng.standard_normal((3, 4, 4)) for _ in range(n)]
    total, ref, tar = flow.compute_loss(v, u, n - 1).values()
    assert abs(total - (ref + tar)) <= 1e-6
    assert min(total, ref, tar) >= 0
    if n == 1:
        assert ref == 0.0


def test_loss_gradient_matches_fd():
    rng = np.random.default_rng(3)
    v = [_t(rng.standard_normal((3, 4, 4))) for _ in range(3)]
    u = [rng.standard_normal((3, 4, 4)) for _ in range(3)]
    assert finite_diff_check(lambda: flow.compute_loss(v, u, 2).total, v, 1e-5) < 1e-5
