"""Tests for indifference prices, strategies and hedges."""
import logging
import math

import numpy as np
import pytest

from pyindiff.exceptions import ModelValidationError
from pyindiff.geometry import ConstraintSet
from pyindiff.model import RiskParams
from pyindiff.regression import RegressionBasis
from pyindiff.pricing import (
    buying_price,
    hedge,
    hedge_limit_small_alpha,
    indifference_price,
    optimal_strategy,
    run_price,
    utility_along_strategy,
)
from pyindiff.solver import ClampPolicy
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


def test_complete_market_price(basis: RegressionBasis) -> None:
    """Test the price of B_T is its mean under the martingale measure."""
    model = brownian_market(b=0.5)
    run = run_price(model, ConstraintSet.full(1), RiskParams(alpha=1.0), expression_payoff("b1", model),
                    paths(model), basis, clamp=NO_CLAMP)
    assert run.report.price.value == pytest.approx(-0.5, abs=0.03)
    assert run.report.y0_claim.value == pytest.approx(-0.625, abs=0.03)
    assert run.report.y0_zero.value == pytest.approx(-0.125, abs=1e-6)


def test_untraded_risk_price(basis: RegressionBasis) -> None:
    """Test an untraded Gaussian is priced at its certainty equivalent alpha/2."""
    model = incomplete_market()
    ens = paths(model, n_paths=10_000, steps=10)
    run = run_price(model, ConstraintSet.full(1), RiskParams(alpha=1.0), expression_payoff("b2", model),
                    ens, basis, clamp=NO_CLAMP)
    assert run.report.price.value == pytest.approx(0.5, abs=0.04)
    row = run.report.as_row("r1")
    assert row["run_id"] == "r1" and row["method"] == "lsmc"
    assert run.report.as_dict()["admissible_set"] == "A_D'"


def test_factor_model_prices() -> None:
    """Test the selling and the buying price of V_T on the grid."""
    model = factor_market()
    payoff = expression_payoff("v", model)
    params = RiskParams(alpha=1.0)
    report = indifference_price(model, ConstraintSet.full(1), params, payoff, None, RegressionBasis(), "pde")
    assert report.price.value == pytest.approx(0.14, abs=1e-6)
    assert report.tolerance < 1e-5
    bought = buying_price(model, ConstraintSet.full(1), params, payoff, None, RegressionBasis(), "pde")
    assert bought.value == pytest.approx(-0.5, abs=1e-6)
    assert bought.value <= report.price.value


def test_value_functions() -> None:
    """Test V(0, x) = -exp(-alpha (x - Y_0))."""
    model = factor_market()
    report = indifference_price(model, ConstraintSet.full(1), RiskParams(alpha=1.0),
                                expression_payoff("v", model), None, RegressionBasis(), "pde")
    assert report.value_function(1.0) == pytest.approx(-math.exp(-(1.0 - 0.095)), rel=1e-6)
    assert report.no_claim_value(1.0) == pytest.approx(-math.exp(-(1.0 + 0.045)), rel=1e-6)


def test_unknown_method(basis: RegressionBasis) -> None:
    """Test only lsmc and pde are accepted."""
    model = brownian_market()
    with pytest.raises(ModelValidationError):
        run_price(model, ConstraintSet.full(1), RiskParams(alpha=1.0), expression_payoff("b1", model),
                  None, basis, method="picard")
    with pytest.raises(ModelValidationError):
        run_price(model, ConstraintSet.full(1), RiskParams(alpha=1.0), expression_payoff("b1", model),
                  None, basis)


def test_failed_integrability_is_rejected(basis: RegressionBasis) -> None:
    """Test payoffs whose exponential moment overflows are refused."""
    model = brownian_market()
    with pytest.raises(ModelValidationError):
        run_price(model, ConstraintSet.full(1), RiskParams(alpha=1.0), expression_payoff("exp(5*b1)", model),
                  paths(model, n_paths=500, steps=2), basis)


def test_integrability_warning_is_logged_once(basis: RegressionBasis, caplog: pytest.LogCaptureFixture) -> None:
    """Test a rejected payoff reports its integrability verdict a single time."""
    model = brownian_market()
    with caplog.at_level(logging.WARNING, logger="pyindiff.model"):
        with pytest.raises(ModelValidationError) as err:
            run_price(model, ConstraintSet.full(1), RiskParams(alpha=1.0), expression_payoff("exp(5*b1)", model),
                      paths(model, n_paths=500, steps=2), basis)
    assert err.value.field == "payoff"
    checks = [r for r in caplog.records if r.getMessage().startswith("Integrability check")]
    assert len(checks) == 1


def test_hedge_in_the_factor_model() -> None:
    """Test the hedge kappa1 u_v / sigma = 3 for F = V."""
    model = factor_market()
    ens = paths(model, n_paths=200, steps=5)
    run = run_price(model, ConstraintSet.full(1), RiskParams(alpha=1.0), expression_payoff("v", model),
                    ens, RegressionBasis(), method="pde", grid_points=401)
    report = hedge(run)
    assert np.allclose(report.pi_zero, 1.5)
    assert np.allclose(report.pi_claim, 4.5, atol=1e-5)
    assert np.allclose(report.hedge, 3.0, atol=1e-5)
    assert report.as_dict()["hedge_mean_t0"] == pytest.approx([3.0], abs=1e-5)
    assert report.membership_violation == 0.0


def test_strategy_respects_the_cone(basis: RegressionBasis) -> None:
    """Test projected strategies stay in a no short selling cone."""
    model = brownian_market(b=-0.3)
    ens = paths(model, n_paths=2000, steps=5)
    run = run_price(model, ConstraintSet.cone([[1.0]]), RiskParams(alpha=1.0), expression_payoff("b1", model),
                    ens, basis, clamp=NO_CLAMP)
    leg = optimal_strategy(run.zero, model, ConstraintSet.cone([[1.0]]), 1.0)
    assert np.all(leg.pi >= 0.0)
    assert leg.projection_residual <= 1e-12


def test_utility_along_the_optimal_strategy(basis: RegressionBasis) -> None:
    """Test E[-exp(-alpha (X_T - F))] = V(0, 0) and that a perturbed strategy does worse."""
    model = brownian_market(b=0.5)
    run = run_price(model, ConstraintSet.full(1), RiskParams(alpha=1.0), expression_payoff("b1", model),
                    paths(model), basis, clamp=NO_CLAMP)
    optimal = utility_along_strategy(run, 0.0)
    assert optimal.within(-math.exp(-0.625), n_se=4, abs_tol=0.01)
    worse = utility_along_strategy(run, 0.0, np.array([0.5]))
    assert worse.value < optimal.value
    assert worse.within(-math.exp(-0.5), n_se=4, abs_tol=0.01)


def test_hedge_limit_small_alpha(basis: RegressionBasis) -> None:
    """Test the limit hedge projects H onto the traded directions."""
    model = incomplete_market()
    ens = paths(model, n_paths=2000, steps=4)
    run = run_price(model, ConstraintSet.full(1), RiskParams(alpha=1.0), expression_payoff("b1 + b2", model),
                    ens, basis, clamp=NO_CLAMP)
    pi = hedge_limit_small_alpha(run.claim, ConstraintSet.full(1))
    assert run.claim.z is not None
    assert np.allclose(pi[..., 0], run.claim.z[..., 0])
    with pytest.raises(ModelValidationError):
        hedge_limit_small_alpha(run.claim, ConstraintSet.cone([[1.0]]))
