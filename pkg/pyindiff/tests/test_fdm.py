"""Tests for the explicit finite difference solver."""
import math

import numpy as np
import pytest

from pyindiff.exceptions import ModelValidationError
from pyindiff.fdm import SpaceGrid, richardson, solve_backward


def no_hamiltonian(t: float, v: np.ndarray, p: np.ndarray):
    """H = 0, the backward heat equation."""
    return np.zeros_like(p), np.zeros_like(p)


def transport(speed: float):
    """H = c p."""

    def hamiltonian(t: float, v: np.ndarray, p: np.ndarray):
        return speed * p, np.full_like(p, speed)

    return hamiltonian


def hopf_cole(t: float, v: np.ndarray, p: np.ndarray):
    """H = p^2 / 2."""
    return 0.5 * p * p, p


def test_space_grid() -> None:
    """Test nodes, spacing and coarsening."""
    grid = SpaceGrid.around(1.0, 0.5, sds=4, points=9)
    assert (grid.lower, grid.upper) == (-1.0, 3.0)
    assert grid.dv == 0.5
    assert grid.coarsened().points == 5
    with pytest.raises(ModelValidationError):
        SpaceGrid(0.0, 1.0, 4)
    with pytest.raises(ModelValidationError):
        SpaceGrid(1.0, 1.0, 11)


def test_heat_equation() -> None:
    """Test u(t, v) = v^2 + T - t."""
    grid = SpaceGrid.around(0.0, 1.0, points=401)
    sol = solve_backward(grid.v**2, grid, 1.0, no_hamiltonian, save_times=[0.5])
    assert sol.times.tolist() == [1.0, 0.5, 0.0]
    assert sol.value(0.0) == pytest.approx(1.0, abs=1e-6)
    assert float(sol.at(1, np.array(1.0))) == pytest.approx(1.5, abs=1e-6)
    assert float(sol.slope(2, np.array(1.0))) == pytest.approx(2.0, abs=1e-6)
    assert sol.viscous_steps == 0


def test_transport_is_exact_on_linear_data() -> None:
    """Test u(0, v) = v + c T for linear terminal data."""
    grid = SpaceGrid.around(0.0, 1.0, sds=4, points=101)
    sol = solve_backward(grid.v.copy(), grid, 1.0, transport(1.0))
    assert sol.value(0.3) == pytest.approx(1.3, abs=1e-9)
    assert sol.viscous_steps == 0


def test_large_drift_adds_viscosity() -> None:
    """Test a cell Peclet number above one switches to Lax-Friedrichs and shrinks the step."""
    grid = SpaceGrid.around(0.0, 1.0, sds=4, points=101)
    calm = solve_backward(grid.v.copy(), grid, 1.0, transport(1.0))
    stiff = solve_backward(grid.v.copy(), grid, 1.0, transport(20.0))
    assert stiff.viscous_steps > 0
    assert stiff.steps > calm.steps
    assert stiff.value(0.0) == pytest.approx(20.0, abs=1e-8)


def test_hopf_cole() -> None:
    """Test u = ln E[exp(F(v + B))] for H = p^2/2 and F = -v^2/4."""
    grid = SpaceGrid.around(0.0, 1.0, points=801)
    fine, err = richardson(lambda v: -0.25 * v * v, grid, 1.0, hopf_cole, 0.0)
    assert fine.value(0.0) == pytest.approx(-0.5 * math.log(1.5), abs=1e-3)
    assert err < 1e-3


def test_terminal_shape() -> None:
    """Test the terminal values must live on the grid."""
    grid = SpaceGrid.around(0.0, 1.0, points=11)
    with pytest.raises(ModelValidationError):
        solve_backward(np.zeros(10), grid, 1.0, no_hamiltonian)
