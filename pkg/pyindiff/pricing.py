"""Indifference prices, optimal strategies and hedges from solved BSDEs."""
import dataclasses
import logging
import math
from typing import Any, Dict, Optional

import numpy as np

from .exceptions import ModelValidationError, NumericalError
from .geometry import ConstraintSet, ImageSet, dist2, project_image
from .model import (
    AdmissibleSet,
    AssumptionReport,
    MarketModel,
    Payoff,
    RiskParams,
    admissible_label,
    check_assumption2,
)
from .models import Estimate, Verdict
from .paths import PathEnsemble, simulate_wealth
from .regression import RegressionBasis
from .solver import (
    BsdeSolution,
    BsdeSpec,
    ClampPolicy,
    CorridorBounds,
    bounds,
    solve_lsmc,
    solve_pde_1d,
    state_names,
)
from .vec import vecDot

_LOGGER = logging.getLogger(__name__)

METHODS = ("lsmc", "pde")


@dataclasses.dataclass(frozen=True)
class PriceReport:
    """C_0 = Y_0(F) - Y_0(0) with its paired standard error and bounds."""

    alpha: float
    payoff: str
    method: str
    y0_claim: Estimate
    y0_zero: Estimate
    price: Estimate
    tolerance: float
    corridor: CorridorBounds
    admissible: AdmissibleSet
    assumption: Optional[AssumptionReport]
    diagnostics: Dict[str, Any]

    def value_function(self, x: float) -> float:
        """V(0, x) = -exp(-alpha (x - Y_0(F)))."""
        return -math.exp(-self.alpha * (x - self.y0_claim.value))

    def no_claim_value(self, x: float) -> float:
        """V^0(0, x) = -exp(-alpha (x - Y_0(0)))."""
        return -math.exp(-self.alpha * (x - self.y0_zero.value))

    @property
    def verdict(self) -> Verdict:
        """FAIL if a solve clamped too often or the integrability check failed."""
        if self.diagnostics.get("claim", {}).get("verdict") == Verdict.FAIL.value:
            return Verdict.FAIL
        if self.diagnostics.get("zero", {}).get("verdict") == Verdict.FAIL.value:
            return Verdict.FAIL
        if self.assumption is not None and self.assumption.verdict is not Verdict.PASS:
            return self.assumption.verdict
        return Verdict.PASS

    def as_dict(self, x: float = 0.0) -> Dict[str, Any]:
        """Convert to a dict."""
        return {
            "alpha": self.alpha,
            "payoff": self.payoff,
            "method": self.method,
            "y0_claim": self.y0_claim.as_dict(),
            "y0_zero": self.y0_zero.as_dict(),
            "price": self.price.as_dict(),
            "tolerance": self.tolerance,
            "corridor": self.corridor.as_dict(),
            "admissible_set": self.admissible.value,
            "assumption": None if self.assumption is None else self.assumption.as_dict(),
            "value_function": {"x": x, "claim": self.value_function(x), "no_claim": self.no_claim_value(x)},
            "diagnostics": self.diagnostics,
            "verdict": self.verdict.value,
        }

    def as_row(self, run_id: str) -> Dict[str, Any]:
        """One CSV row."""
        return {
            "run_id": run_id,
            "alpha": self.alpha,
            "method": self.method,
            "price": self.price.value,
            "price_se": self.price.se,
            "tolerance": self.tolerance,
            "y0_claim": self.y0_claim.value,
            "y0_claim_se": self.y0_claim.se,
            "y0_zero": self.y0_zero.value,
            "y0_zero_se": self.y0_zero.se,
            "lower_bound": self.corridor.lower.value,
            "lower_bound_se": self.corridor.lower.se,
            "upper_bound": self.corridor.upper.value,
            "upper_bound_se": self.corridor.upper.se,
            "clamp_fraction": max(
                self.diagnostics.get("claim", {}).get("clamp_fraction", 0.0),
                self.diagnostics.get("zero", {}).get("clamp_fraction", 0.0),
            ),
            "admissible_set": self.admissible.value,
        }


@dataclasses.dataclass(frozen=True, eq=False)
class PriceRun:
    """Both legs of a price computation on one ensemble."""

    model: MarketModel
    constraint: ConstraintSet
    params: RiskParams
    payoff: Payoff
    ensemble: Optional[PathEnsemble]
    claim: BsdeSolution
    zero: BsdeSolution
    report: PriceReport


@dataclasses.dataclass(frozen=True, eq=False)
class HedgeReport:
    """Strategies pi*(F), pi*(0) and the hedge pi*(F) - pi*(0) per path and step, (N, K, d)."""

    pi_claim: np.ndarray
    pi_zero: np.ndarray
    hedge: np.ndarray
    projection_residual: float
    membership_violation: float

    def as_dict(self) -> Dict[str, Any]:
        """Summary statistics."""
        return {
            "hedge_mean_t0": np.mean(self.hedge[:, 0], axis=0).tolist(),
            "hedge_abs_max": float(np.max(np.abs(self.hedge))) if self.hedge.size else 0.0,
            "projection_residual": self.projection_residual,
            "membership_violation": self.membership_violation,
        }


def _paired(claim: BsdeSolution, zero: BsdeSolution) -> Estimate:
    diff = claim.y0.value - zero.y0.value
    if claim.y0_samples is not None and zero.y0_samples is not None:
        return Estimate(diff, Estimate.from_samples(claim.y0_samples - zero.y0_samples).se)
    return Estimate(diff, math.hypot(claim.y0.se, zero.y0.se))


def run_price(
    model: MarketModel,
    constraint: ConstraintSet,
    params: RiskParams,
    payoff: Payoff,
    ensemble: Optional[PathEnsemble],
    basis: RegressionBasis,
    method: str = "lsmc",
    clamp: ClampPolicy = ClampPolicy(),
    zero_ensemble: Optional[PathEnsemble] = None,
    grid_points: Optional[int] = None,
) -> PriceRun:
    """Solve BSDE(F, f) and BSDE(0, f) on the same ensemble and basis.

    zero_ensemble solves the zero leg on other paths; it exists for
    diagnostics only and drops the common random numbers.
    """
    if method not in METHODS:
        raise ModelValidationError(f"unknown method {method!r}, expected one of {METHODS}", field="solver.method")
    assumption = None
    if ensemble is not None:
        assumption = check_assumption2(model, payoff, params, ensemble)
        if assumption.verdict is Verdict.FAIL:
            raise ModelValidationError(
                f"integrability check failed for {payoff.label}: {assumption.upper_moment}", field="payoff"
            )
    spec = BsdeSpec(payoff, constraint, params.alpha, clamp)
    zero_spec = spec.with_payoff(Payoff.constant(0.0))
    if method == "lsmc":
        if ensemble is None:
            raise ModelValidationError("Monte Carlo pricing needs an ensemble")
        names = state_names(payoff, model)
        claim = solve_lsmc(spec, ensemble, basis, names)
        zero = solve_lsmc(zero_spec, zero_ensemble or ensemble, basis, names)
        price = _paired(claim, zero) if zero_ensemble is None else claim.y0 - zero.y0
        corridor = bounds(spec, ensemble)
    else:
        extra = {} if grid_points is None else {"points": grid_points}
        claim = solve_pde_1d(spec, model, ensemble, **extra)
        zero = solve_pde_1d(zero_spec, model, ensemble, **extra)
        price = Estimate.exact(claim.y0.value - zero.y0.value)
        corridor = bounds(spec, ensemble) if ensemble is not None else CorridorBounds(
            Estimate(-math.inf, 0.0), Estimate(math.inf, 0.0)
        )
    tolerance = 3.0 * price.se + claim.diagnostics.richardson + zero.diagnostics.richardson
    report = PriceReport(
        alpha=params.alpha,
        payoff=payoff.label,
        method=method,
        y0_claim=claim.y0,
        y0_zero=zero.y0,
        price=price,
        tolerance=tolerance,
        corridor=corridor,
        admissible=admissible_label(assumption, constraint.is_cone),
        assumption=assumption,
        diagnostics={"claim": claim.diagnostics.as_dict(), "zero": zero.diagnostics.as_dict()},
    )
    _LOGGER.info(
        "Indifference price of %s at alpha=%g: %.6f +- %.6f (%s)",
        payoff.label, params.alpha, price.value, price.se, method,
    )
    return PriceRun(model, constraint, params, payoff, ensemble, claim, zero, report)


def indifference_price(
    model: MarketModel,
    constraint: ConstraintSet,
    params: RiskParams,
    payoff: Payoff,
    ensemble: Optional[PathEnsemble],
    basis: RegressionBasis,
    method: str = "lsmc",
) -> PriceReport:
    """C_0 = Y_0(F) - Y_0(0) with common random numbers."""
    return run_price(model, constraint, params, payoff, ensemble, basis, method).report


def buying_price(
    model: MarketModel,
    constraint: ConstraintSet,
    params: RiskParams,
    payoff: Payoff,
    ensemble: Optional[PathEnsemble],
    basis: RegressionBasis,
    method: str = "lsmc",
) -> Estimate:
    """-C_0(-F), the price at which the claim is bought."""
    report = indifference_price(model, constraint, params, payoff.negated(), ensemble, basis, method)
    return Estimate(-report.price.value, report.price.se)


@dataclasses.dataclass(frozen=True, eq=False)
class StrategyLeg:
    """pi* with sigma^T pi* = Proj(Z + theta/alpha) at every path and step."""

    pi: np.ndarray
    image: np.ndarray
    projection_residual: float
    membership_violation: float


def optimal_strategy(
    solution: BsdeSolution, model: MarketModel, constraint: ConstraintSet, alpha: float
) -> StrategyLeg:
    """Project Z + theta/alpha onto sigma^T C at every node."""
    if solution.z is None or solution.ensemble is None:
        raise ModelValidationError("The strategy needs Z on the paths of an ensemble")
    ens = solution.ensemble
    n, steps, m = solution.z.shape
    pi = np.empty((n, steps, model.d))
    image = np.empty((n, steps, m))
    residual = violation = 0.0
    for i in range(steps):
        x = solution.z[:, i] + ens.theta[:, i] / alpha
        point, pi[:, i] = project_image(ImageSet(constraint, ens.sigma[:, i]), x)
        image[:, i] = point
        if constraint.is_cone:
            residual = max(residual, float(np.max(vecDot(point - x, point))))
        violation = max(violation, float(np.max(np.sqrt(dist2(constraint, pi[:, i])))))
    if violation > 1e-6:
        raise NumericalError(f"Projected strategy leaves the constraint set by {violation:.3e}")
    return StrategyLeg(pi, image, residual, violation)


def hedge(run: PriceRun) -> HedgeReport:
    """pi*(F) - pi*(0) on the shared ensemble."""
    alpha = run.params.alpha
    claim = optimal_strategy(run.claim, run.model, run.constraint, alpha)
    zero = optimal_strategy(run.zero, run.model, run.constraint, alpha)
    return HedgeReport(
        claim.pi,
        zero.pi,
        claim.pi - zero.pi,
        max(claim.projection_residual, zero.projection_residual),
        max(claim.membership_violation, zero.membership_violation),
    )


def utility_along_strategy(
    run: PriceRun, x: float, perturbation: Optional[np.ndarray] = None
) -> Estimate:
    """E[-exp(-alpha (X_T - F))] for the wealth of pi*(F), optionally shifted by a constant."""
    ens = run.claim.ensemble
    if ens is None:
        raise ModelValidationError("The utility check needs an ensemble")
    leg = optimal_strategy(run.claim, run.model, run.constraint, run.params.alpha)
    pi = leg.pi if perturbation is None else leg.pi + np.asarray(perturbation, dtype=float)
    wealth = simulate_wealth(ens, pi, x)
    with np.errstate(over="ignore"):
        utility = -np.exp(-run.params.alpha * (wealth[:, -1] - run.payoff.evaluate(ens)))
    if not np.all(np.isfinite(utility)):
        raise NumericalError(f"Utility overflow at alpha={run.params.alpha:g}")
    return Estimate.from_samples(utility)


def hedge_limit_small_alpha(limit: BsdeSolution, constraint: ConstraintSet) -> np.ndarray:
    """pi with sigma^T pi = Proj(H^0), the small risk aversion limit of the hedge; subspaces only."""
    if not constraint.is_subspace:
        raise ModelValidationError("The hedge limit is available for subspace constraints", field="constraint")
    if limit.z is None or limit.ensemble is None:
        raise ModelValidationError("The hedge limit needs H^0 on the paths of an ensemble")
    ens = limit.ensemble
    n, steps, _ = limit.z.shape
    pi = np.empty((n, steps, constraint.dim))
    for i in range(steps):
        _, pi[:, i] = project_image(ImageSet(constraint, ens.sigma[:, i]), limit.z[:, i])
    return pi
