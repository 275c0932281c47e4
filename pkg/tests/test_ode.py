import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eicoal.ode import (
    GridConfigurationError,
    ODEDomainError,
    ei_ode_step,
    ei_propagator,
    propagate,
    solve_on_grid,
)
from oracles import rk4_ei


def test_dt_zero_is_identity():
    assert ei_ode_step(3.5, 1.25, 0.3, 0.2, 0.7, 0.0) == (3.5, 1.25)
    g1, g2, h1, h2 = ei_propagator(0.3, 0.2, 0.7, 0.0)
    assert (g1, g2, h1, h2) == (1.0, 0.0, 0.0, 1.0)


def test_zero_birth_rate_closed_form():
    # alpha = 0: E decays, I is fed by E then decays
    gamma, nu, t = 0.5, 0.2, 3.0
    E, I = ei_ode_step(2.0, 1.0, gamma, nu, 0.0, t)
    assert np.isclose(E, 2.0 * np.exp(-gamma * t), rtol=1e-13)
    exact_I = np.exp(-nu * t) + 2.0 * gamma / (gamma - nu) * (np.exp(-nu * t) - np.exp(-gamma * t))
    assert np.isclose(I, exact_I, rtol=1e-12)


def test_matches_rk4_examples():
    for E0, I0, g, n, a, t in [(1.1, 1.1, 0.25, 1 / 7, 2.2 / 7, 20.0), (0.0, 1.0, 0.5, 1 / 3, 2 / 3, 10.0)]:
        ours = np.array(ei_ode_step(E0, I0, g, n, a, t))
        assert np.allclose(ours, rk4_ei(E0, I0, g, n, a, t), rtol=1e-9)


def test_near_degenerate_discriminant():
    # gamma == nu and alpha tiny: B = 2 sqrt(alpha gamma) < 1e-6
    g = n = 0.3
    a = 1e-14
    ours = np.array(ei_ode_step(1.0, 2.0, g, n, a, 4.0))
    assert np.allclose(ours, rk4_ei(1.0, 2.0, g, n, a, 4.0), rtol=1e-9)


def test_domain_errors():
    with pytest.raises(ODEDomainError):
        ei_ode_step(-1.0, 1.0, 0.2, 0.2, 0.5, 1.0)
    with pytest.raises(ODEDomainError):
        ei_ode_step(1.0, 1.0, 0.0, 0.2, 0.5, 1.0)


def test_grid_must_contain_changepoints():
    with pytest.raises(GridConfigurationError):
        solve_on_grid(0.25, 1 / 7, np.array([2.0, 1.0]), np.array([5.0]), (1.0, 1.0), np.array([0.0, 4.0, 10.0]))
    with pytest.raises(GridConfigurationError):
        solve_on_grid(0.25, 1 / 7, np.array([2.0]), np.array([5.0]), (1.0, 1.0), np.array([0.0, 10.0]))


def test_piecewise_solution_chains_steps():
    grid = np.array([0.0, 2.0, 5.0, 9.0])
    traj = solve_on_grid(0.25, 1 / 7, np.array([2.0, 0.8]), np.array([5.0]), (1.0, 1.5), grid)
    y = rk4_ei(1.0, 1.5, 0.25, 1 / 7, 2.0 / 7, 5.0)
    y = rk4_ei(y[0], y[1], 0.25, 1 / 7, 0.8 / 7, 4.0)
    assert np.allclose([traj.E[-1], traj.I[-1]], y, rtol=1e-9)
    assert traj.to_csv().splitlines()[0] == "time,E,I"


@settings(max_examples=40, deadline=None)
@given(
    st.floats(0.01, 2.0), st.floats(0.01, 2.0), st.floats(0.0, 3.0),
    st.lists(st.floats(0.0, 3.0), min_size=1, max_size=6),
)
def test_semigroup_and_positivity(gamma, nu, alpha, dts):
    E, I = propagate(gamma, nu, np.full(len(dts), alpha), np.array(dts), 1.0, 0.5)
    assert np.all(E >= 0) and np.all(I >= 0)
    E1, I1 = ei_ode_step(1.0, 0.5, gamma, nu, alpha, float(np.sum(dts)))
    assert np.isclose(E[-1], E1, rtol=1e-10, atol=1e-300)
    assert np.isclose(I[-1], I1, rtol=1e-10, atol=1e-300)
