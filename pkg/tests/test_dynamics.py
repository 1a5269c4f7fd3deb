import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chaos_da.dynamics import (
    LorenzParams,
    TimeGrid,
    integrate,
    integrate_many,
    lorenz_rhs,
    rk2_step,
    rk4_reference,
)

P = LorenzParams()


def test_default_params():
    assert (P.sigma, P.rho, P.beta) == (10.0, 28.0, 8.0 / 3.0)


@pytest.mark.parametrize("field", ["sigma", "rho", "beta"])
def test_params_must_be_positive(field):
    with pytest.raises(ValueError):
        LorenzParams(**{field: 0.0})


def test_time_grid():
    grid = TimeGrid(steps_per_obs=50)
    assert grid.dt == 0.001
    assert grid.t_obs == 50 * 0.001
    assert TimeGrid.from_interval(0.1).steps_per_obs == 100
    with pytest.raises(ValueError):
        TimeGrid.from_interval(0.0015)


def test_rhs_examples():
    np.testing.assert_array_equal(lorenz_rhs([0, 0, 0]), [0, 0, 0])
    c = math.sqrt(72.0)
    np.testing.assert_allclose(lorenz_rhs([c, c, 27.0]), [0, 0, 0], atol=1e-12)
    np.testing.assert_allclose(lorenz_rhs([1, 1, 1]), [0, 26, 1 - 8 / 3], rtol=0, atol=1e-15)


@pytest.mark.parametrize("k", range(3))
def test_fixed_points_are_stationary(k):
    p = P.fixed_points()[k]
    assert np.abs(rk2_step(p, P, 0.001) - p).max() <= 1e-12


def test_zero_step_is_identity():
    x = np.array([3.0, -2.0, 17.0])
    np.testing.assert_array_equal(rk2_step(x, P, 0.0), x)


def test_rk2_against_fine_rk4():
    # one midpoint step carries an O(dt^3) local error of ~1.2e-6 here; the fine RK4 run is the oracle
    x = np.ones(3)
    err = np.abs(rk2_step(x, P, 0.001) - rk4_reference(x, P, 0.001, 1e-6)).max()
    assert err < 2e-6
    assert np.abs(rk4_reference(x, P, 0.001, 1e-6) - rk4_reference(x, P, 0.001, 5e-7)).max() < 1e-12


def test_local_order_of_accuracy():
    x = np.ones(3)
    errs = [np.abs(rk2_step(x, P, dt) - rk4_reference(x, P, dt, 1e-6)).max() for dt in (0.002, 0.001)]
    assert 7.0 <= errs[0] / errs[1] <= 9.0


def test_integrate_shapes_and_pairs():
    traj = integrate([1, 2, 3], P, TimeGrid(), 0)
    assert len(traj) == 1
    np.testing.assert_array_equal(traj.states[0], [1, 2, 3])
    np.testing.assert_array_equal(traj.derivs[0], lorenz_rhs([1, 2, 3]))


def test_integrate_matches_repeated_rk2_bitwise():
    traj = integrate([1, 1, 1], P, TimeGrid(), 500)
    x = np.ones(3)
    for i in range(1, 501):
        x = rk2_step(x, P, 0.001)
        np.testing.assert_array_equal(traj.states[i], x)
    for s, d in traj.pairs()[::50]:
        np.testing.assert_array_equal(d, lorenz_rhs(s))


def test_fixed_point_trajectory_constant():
    p = P.fixed_points()[1]
    traj = integrate(p, P, TimeGrid(), 100)
    assert len(traj) == 101
    assert np.abs(traj.states - p).max() <= 1e-10


def test_sensitive_dependence():
    a = integrate([1, 1, 1], P, TimeGrid(), 50_000).states
    b = integrate([1 + 1e-9, 1, 1], P, TimeGrid(), 50_000).states
    assert np.abs(a - b).max() > 1.0


def test_attractor_bounds():
    states = integrate([1, 1, 1], P, TimeGrid(), 100_000).states[10_000:]
    assert np.abs(states[:, 0]).max() < 25
    assert np.abs(states[:, 1]).max() < 35
    assert states[:, 2].min() > 0 and states[:, 2].max() < 55


def test_blowup_guard():
    fast = LorenzParams(sigma=10.0, rho=28.0, beta=8 / 3)
    traj = integrate([1e7, 0, 0], fast, TimeGrid(), 10)
    assert traj.diverged and len(traj) == 1
    traj = integrate([1e3, 1e3, 1e3], fast, TimeGrid(dt=0.05), 1000)
    assert traj.diverged
    assert len(traj) < 1001


def test_integrate_many_matches_single():
    x0 = np.array([[1.0, 1.0, 1.0], [-3.0, 2.0, 20.0]])
    states, derivs, flags = integrate_many(x0, P, 0.001, 200)
    assert not flags.any()
    for m in range(2):
        single = integrate(x0[m], P, TimeGrid(), 200)
        np.testing.assert_array_equal(states[m], single.states)
        np.testing.assert_array_equal(derivs[m], single.derivs)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=3, max_size=3), st.integers(0, 300))
def test_determinism(x0, n):
    a = integrate(x0, P, TimeGrid(), n)
    b = integrate(x0, P, TimeGrid(), n)
    np.testing.assert_array_equal(a.states, b.states)
