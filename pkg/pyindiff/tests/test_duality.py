"""Tests for the dual representation."""
import numpy as np
import pytest

from pyindiff.duality import (
    build_candidate,
    dual_audit,
    dual_value,
    duality_gap,
    extract_optimal,
    martingale_violation,
    minimal_entropy_price,
    minimal_entropy_value,
    perturbed_candidate,
)
from pyindiff.exceptions import InfeasibleCandidateError, ModelValidationError
from pyindiff.geometry import ConstraintSet
from pyindiff.model import RiskParams
from pyindiff.pricing import run_price
from pyindiff.regression import RegressionBasis
from pyindiff.solver import BsdeSpec, ClampPolicy, solve_lsmc
from pyindiff.tests.fixtures import brownian_market, expression_payoff, incomplete_market, paths

NO_CLAMP = ClampPolicy(enabled=False)


@pytest.fixture()
def no_trading():
    """F = B_T solved without trading, Y_0 = 1/2."""
    model = brownian_market()
    spec = BsdeSpec(expression_payoff("b1", model), ConstraintSet.zero(1), 1.0, NO_CLAMP)
    return solve_lsmc(spec, paths(model), RegressionBasis(degree=2))


def test_infeasible_candidate() -> None:
    """Test q with q + theta off the barrier cone is rejected with its location."""
    model = incomplete_market(b=0.5)
    ens = paths(model, n_paths=100, steps=4)
    with pytest.raises(InfeasibleCandidateError) as err:
        build_candidate(ens, ConstraintSet.full(1), 1.0, np.array([0.0, 0.3]), "bad")
    assert (err.value.path, err.value.step) == (0, 0)
    cand = build_candidate(ens, ConstraintSet.full(1), 1.0, np.array([-0.5, 0.3]), "good")
    assert np.allclose(cand.fstar_integral, (0.25 + 0.09) / 2)
    assert martingale_violation(cand, ConstraintSet.full(1)) <= 1e-12


def test_dual_value_of_the_martingale_measure() -> None:
    """Test the unique martingale measure of a complete market attains Y_0."""
    model = brownian_market(b=0.5)
    ens = paths(model)
    cand = build_candidate(ens, ConstraintSet.full(1), 1.0, np.array([-0.5]), "mmm")
    assert dual_value(cand, expression_payoff("b1", model)).within(-0.625, n_se=4)


def test_weak_duality(no_trading) -> None:
    """Test constant densities give c - c^2/2 <= 1/2."""
    ens = no_trading.ensemble
    payoff = no_trading.spec.payoff
    for c in (0.0, 0.5, 1.5):
        cand = build_candidate(ens, ConstraintSet.zero(1), 1.0, np.array([c]), f"c={c}")
        assert dual_value(cand, payoff).within(c - c * c / 2, n_se=4)
        gap = duality_gap(no_trading, cand, payoff)
        assert gap.value >= -3 * gap.se


def test_optimal_density_closes_the_gap(no_trading) -> None:
    """Test q* = alpha Z attains the primal value."""
    cand = extract_optimal(no_trading)
    assert np.mean(cand.q) == pytest.approx(1.0, abs=0.05)
    gap = duality_gap(no_trading, cand, no_trading.spec.payoff)
    assert abs(gap.value) < 0.05


def test_dual_audit(no_trading) -> None:
    """Test the audit rows: the optimal density first, then perturbations."""
    rows = dual_audit(no_trading, candidates=2, seed=3)
    assert [row.candidate for row in rows] == ["optimal", "perturbed-0", "perturbed-1"]
    assert all(row.weak_duality_ok for row in rows[1:])
    assert rows[1].gap > 0.0
    assert rows[0].as_dict()["candidate"] == "optimal"
    again = dual_audit(no_trading, candidates=2, seed=3)
    assert [row.dual_value for row in again] == [row.dual_value for row in rows]


def test_gap_needs_the_same_paths(no_trading) -> None:
    """Test primal and dual must share the ensemble."""
    model = brownian_market()
    other = build_candidate(paths(model, n_paths=100, steps=20), ConstraintSet.zero(1), 1.0, np.array([1.0]), "x")
    with pytest.raises(ModelValidationError):
        duality_gap(no_trading, other, no_trading.spec.payoff)


def test_minimal_entropy_value(no_trading) -> None:
    """Test E^Q[F] - H(Q|P)/alpha for the optimal and a suboptimal density."""
    payoff = no_trading.spec.payoff
    ens = no_trading.ensemble
    best = build_candidate(ens, ConstraintSet.zero(1), 1.0, np.array([1.0]), "best")
    half = build_candidate(ens, ConstraintSet.zero(1), 1.0, np.array([0.5]), "half")
    assert minimal_entropy_value(best, payoff, 1.0, ConstraintSet.zero(1)).within(0.5, n_se=4)
    assert minimal_entropy_value(half, payoff, 1.0, ConstraintSet.zero(1)).within(0.375, n_se=4)
    with pytest.raises(ModelValidationError):
        minimal_entropy_value(best, payoff, 1.0, ConstraintSet.box([-1.0], [1.0]))


def test_minimal_entropy_price() -> None:
    """Test the entropy representation of the complete market price."""
    model = brownian_market(b=0.5)
    payoff = expression_payoff("b1", model)
    run = run_price(model, ConstraintSet.full(1), RiskParams(alpha=1.0), payoff, paths(model),
                    RegressionBasis(degree=2), clamp=NO_CLAMP)
    assert minimal_entropy_price(run.claim, run.zero, payoff).within(-0.5, n_se=4, abs_tol=0.01)


def test_perturbed_candidate_stays_feasible() -> None:
    """Test perturbed densities under a short selling ban stay martingale measures below the optimum."""
    model = incomplete_market(b=0.5)
    no_short = ConstraintSet.cone([[1.0]])
    spec = BsdeSpec(expression_payoff("b2", model), no_short, 1.0, NO_CLAMP)
    solution = solve_lsmc(spec, paths(model, n_paths=10_000), RegressionBasis(degree=2))
    payoff = spec.payoff
    optimal = dual_value(extract_optimal(solution), payoff)
    for index in range(2):
        cand = perturbed_candidate(solution, 0.5, seed=11, index=index)
        assert cand.label == f"perturbed-{index}"
        assert np.all(np.isfinite(cand.fstar_integral))
        assert martingale_violation(cand, no_short) <= 1e-9
        dual = dual_value(cand, payoff)
        assert dual.value <= optimal.value + 3 * np.hypot(dual.se, optimal.se)
        gap = duality_gap(solution, cand, payoff)
        assert gap.value >= -3 * gap.se
    again = perturbed_candidate(solution, 0.5, seed=11, index=1)
    assert np.array_equal(again.q, perturbed_candidate(solution, 0.5, seed=11, index=1).q)
    assert not np.array_equal(again.q, perturbed_candidate(solution, 0.5, seed=11, index=0).q)
