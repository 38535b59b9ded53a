"""Tests for the BSDE solvers."""
import math

import numpy as np
import pytest

from pyindiff.exceptions import ModelValidationError
from pyindiff.geometry import ConstraintSet
from pyindiff.model import Payoff
from pyindiff.models import Verdict
from pyindiff.regression import RegressionBasis
from pyindiff.solver import (
    BsdeSpec,
    ClampPolicy,
    SolverDiagnostics,
    bounds,
    solve_lsmc,
    solve_pde_1d,
    solve_price_lsmc,
    state_names,
    timestep_study,
)
from pyindiff.tests.fixtures import (
    brownian_market,
    expression_payoff,
    factor_market,
    incomplete_market,
    paths,
)

NO_CLAMP = ClampPolicy(enabled=False)


@pytest.fixture()
def basis() -> RegressionBasis:
    """Quadratic polynomials."""
    return RegressionBasis(degree=2)


def test_no_trading_certainty_equivalent(basis: RegressionBasis) -> None:
    """Test Y_0 = 1/alpha ln E[exp(alpha B_T)] = 1/2 when nothing is traded."""
    model = brownian_market()
    ens = paths(model)
    spec = BsdeSpec(expression_payoff("b1", model), ConstraintSet.zero(1), 1.0, NO_CLAMP)
    sol = solve_lsmc(spec, ens, basis)
    assert sol.y0.value == pytest.approx(0.5, abs=0.03)
    assert sol.y is not None and sol.y.shape == (20_000, 21)
    assert sol.z is not None and np.mean(sol.z[:, 0, 0]) == pytest.approx(1.0, abs=0.05)
    assert sol.diagnostics.method == "lsmc"
    assert len(sol.diagnostics.degrees) == 20


def test_complete_market(basis: RegressionBasis) -> None:
    """Test Y_0 = E^Q[B_T] - theta^2 T/2 with theta = 1/2."""
    model = brownian_market(b=0.5)
    spec = BsdeSpec(expression_payoff("b1", model), ConstraintSet.full(1), 1.0, NO_CLAMP)
    sol = solve_lsmc(spec, paths(model), basis)
    assert sol.y0.value == pytest.approx(-0.625, abs=0.03)


def test_constant_payoff_needs_no_clamp(basis: RegressionBasis) -> None:
    """Test Y = 1 for F = 1 and that nothing is clamped."""
    model = brownian_market(b=0.5)
    spec = BsdeSpec(Payoff.constant(1.0), ConstraintSet.zero(1), 1.0)
    sol = solve_lsmc(spec, paths(model, n_paths=2000, steps=10), basis)
    assert sol.y0.value == pytest.approx(1.0, abs=1e-6)
    assert sol.diagnostics.clamp_count == 0
    assert sol.diagnostics.clamp_total == 2000 * 10
    assert sol.diagnostics.verdict is Verdict.PASS


def test_cash_translation(basis: RegressionBasis) -> None:
    """Test Y_0(F + c) = Y_0(F) + c on the same paths."""
    model = incomplete_market()
    ens = paths(model, n_paths=5000, steps=10)
    payoff = expression_payoff("b1 + b2", model)
    base = BsdeSpec(payoff, ConstraintSet.full(1), 1.0, NO_CLAMP)
    y0 = solve_lsmc(base, ens, basis).y0.value
    shifted = solve_lsmc(base.with_payoff(payoff.shifted(2.0)), ens, basis).y0.value
    assert shifted == pytest.approx(y0 + 2.0, abs=1e-6)


def test_scaling_identity(basis: RegressionBasis) -> None:
    """Test alpha Y_0^alpha(F) = Y_0^1(alpha F) for a cone constraint."""
    model = incomplete_market()
    ens = paths(model, n_paths=5000, steps=10)
    payoff = expression_payoff("max(b1, 0) + b2", model)
    spec = BsdeSpec(payoff, ConstraintSet.full(1), 2.0, NO_CLAMP)
    lhs = 2.0 * solve_lsmc(spec, ens, basis).y0.value
    rhs = solve_lsmc(spec.with_alpha(1.0).with_payoff(payoff.scaled(2.0)), ens, basis).y0.value
    assert lhs == pytest.approx(rhs, abs=1e-6)


def test_price_bsde_matches_the_difference(basis: RegressionBasis) -> None:
    """Test the direct price BSDE against Y_0(F) - Y_0(0) in an incomplete market."""
    model = incomplete_market()
    ens = paths(model, n_paths=10_000, steps=10)
    payoff = expression_payoff("b2", model)
    spec = BsdeSpec(payoff, ConstraintSet.full(1), 1.0, NO_CLAMP)
    names = state_names(payoff, model)
    reference = solve_lsmc(spec.with_payoff(Payoff.constant(0.0)), ens, basis, names)
    price = solve_price_lsmc(spec, ens, basis, reference, names)
    assert price.y0.value == pytest.approx(0.5, abs=0.04)
    assert price.diagnostics.method == "lsmc-price"


def test_price_bsde_checks_its_inputs(basis: RegressionBasis) -> None:
    """Test the price BSDE needs a cone and a reference with alpha = 1 on the same paths."""
    model = brownian_market()
    ens = paths(model, n_paths=500, steps=4)
    zero = Payoff.constant(0.0)
    reference = solve_lsmc(BsdeSpec(zero, ConstraintSet.full(1), 1.0), ens, basis)
    box = BsdeSpec(zero, ConstraintSet.box([-1.0], [1.0]), 1.0)
    with pytest.raises(ModelValidationError):
        solve_price_lsmc(box, ens, basis, reference)
    other = solve_lsmc(BsdeSpec(zero, ConstraintSet.full(1), 2.0), ens, basis)
    with pytest.raises(ModelValidationError):
        solve_price_lsmc(BsdeSpec(zero, ConstraintSet.full(1), 1.0), ens, basis, other)
    with pytest.raises(ModelValidationError):
        solve_price_lsmc(BsdeSpec(zero, ConstraintSet.full(1), 1.0), paths(model, 500, 4, seed=8),
                         basis, reference)


def test_bounds() -> None:
    """Test -E[B-] <= Y_0 <= ln E[exp(B+)] without trading."""
    model = brownian_market()
    spec = BsdeSpec(expression_payoff("b1", model), ConstraintSet.zero(1), 1.0)
    corridor = bounds(spec, paths(model))
    assert corridor.lower.within(-1.0 / math.sqrt(2 * math.pi), n_se=4)
    expected = math.log(0.5 + math.exp(0.5) * 0.5 * (1 + math.erf(1 / math.sqrt(2))))
    assert corridor.upper.within(expected, n_se=4)
    assert not corridor.diverging


def test_diagnostics_verdict() -> None:
    """Test more than 1% clamped values fail."""
    diag = SolverDiagnostics("lsmc", clamp_count=1, clamp_total=100)
    assert diag.verdict is Verdict.PASS
    diag.clamp_count = 2
    assert diag.verdict is Verdict.FAIL
    assert diag.as_dict()["verdict"] == "fail"
    assert SolverDiagnostics("pde").clamp_fraction == 0.0


def test_pde_factor_model() -> None:
    """Test u = v + f(kappa)(T - t) for F = V in the factor model."""
    model = factor_market()
    for source, expected in (("v", 0.095), ("0*v", -0.045), ("-v", 0.455)):
        spec = BsdeSpec(expression_payoff(source, model), ConstraintSet.full(1), 1.0)
        sol = solve_pde_1d(spec, model, points=401)
        assert sol.y0.value == pytest.approx(expected, abs=1e-6)
        assert sol.diagnostics.richardson < 1e-6
        assert sol.fdm_solution is not None


def test_pde_on_paths() -> None:
    """Test Y and Z read off the grid along the paths."""
    model = factor_market()
    ens = paths(model, n_paths=200, steps=5)
    spec = BsdeSpec(expression_payoff("v", model), ConstraintSet.full(1), 1.0)
    sol = solve_pde_1d(spec, model, ens, points=401)
    assert sol.y is not None and sol.z is not None
    assert ens.v is not None
    assert np.allclose(sol.y[:, 0], 0.095, atol=1e-6)
    assert np.allclose(sol.y[:, -1], ens.v[:, -1])
    assert np.allclose(sol.z, [0.6, 0.8], atol=1e-6)


def test_pde_needs_a_factor_model() -> None:
    """Test the grid solver refuses markets without a factor and payoffs of other variables."""
    model = brownian_market()
    with pytest.raises(ModelValidationError):
        solve_pde_1d(BsdeSpec(Payoff.constant(0.0), ConstraintSet.full(1), 1.0), model)
    factor = factor_market()
    with pytest.raises(ModelValidationError):
        solve_pde_1d(BsdeSpec(expression_payoff("b2", factor), ConstraintSet.full(1), 1.0), factor)


def test_timestep_study(basis: RegressionBasis) -> None:
    """Test the coarse solve uses half the steps on the same paths."""
    model = brownian_market(b=0.5)
    spec = BsdeSpec(expression_payoff("b1", model), ConstraintSet.full(1), 1.0, NO_CLAMP)
    fine, coarse = timestep_study(spec, paths(model, n_paths=5000, steps=10), basis)
    assert coarse.ensemble is not None and coarse.ensemble.grid.steps == 5
    assert fine.y0.value == pytest.approx(coarse.y0.value, abs=0.02)
