"""Convex dual representation: dual values of density candidates and duality gaps."""
import dataclasses
import logging
import math
from typing import Any, Dict, List, Optional

import numpy as np

from .drivers import DriverContext, dual_driver, optimal_density
from .exceptions import InfeasibleCandidateError, ModelValidationError
from .geometry import ConstraintSet, ImageSet, project_barrier_cone
from .model import Payoff
from .models import Estimate
from .paths import EntropyEstimate, MeasureChange, PathEnsemble, relative_entropy, stoch_exponential
from .solver import BsdeSolution

_LOGGER = logging.getLogger(__name__)

N_SE = 3.0


@dataclasses.dataclass(frozen=True, eq=False)
class DualCandidate:
    """A density integrand q (N, K, m) with finite f* at every simulated node."""

    label: str
    q: np.ndarray
    measure: MeasureChange
    entropy: EntropyEstimate
    fstar_integral: np.ndarray
    alpha: float

    @property
    def ensemble(self) -> PathEnsemble:
        """The ensemble the candidate lives on."""
        return self.measure.ensemble


def build_candidate(
    ensemble: PathEnsemble, constraint: ConstraintSet, alpha: float, q: np.ndarray, label: str
) -> DualCandidate:
    """Accept q if f*(q) is finite on every path and step; reject it otherwise."""
    n, steps, m = ensemble.dB.shape
    q = np.array(np.broadcast_to(np.asarray(q, dtype=float), (n, steps, m)))
    integral = np.zeros(n)
    for i in range(steps):
        values = dual_driver(DriverContext.at_step(ensemble, constraint, alpha, i), q[:, i])
        if not np.all(np.isfinite(values)):
            path = int(np.argmin(np.isfinite(values)))
            raise InfeasibleCandidateError(f"f* is infinite for candidate {label}", path=path, step=i)
        integral += values * ensemble.grid.dt
    measure = stoch_exponential(q, ensemble)
    return DualCandidate(label, q, measure, relative_entropy(measure), integral, alpha)


def dual_value(candidate: DualCandidate, payoff: Payoff) -> Estimate:
    """E^{Q^q}[F - int f*(q) dt]."""
    values = payoff.evaluate(candidate.ensemble) - candidate.fstar_integral
    return Estimate.from_samples(candidate.measure.weights * values)


def duality_gap(solution: BsdeSolution, candidate: DualCandidate, payoff: Payoff) -> Estimate:
    """Y_0 - dual value; nonnegative up to noise, zero at the optimal density."""
    if solution.ensemble is not None and solution.ensemble is not candidate.ensemble:
        raise ModelValidationError("Primal solution and candidate must share the ensemble")
    dual = dual_value(candidate, payoff)
    if solution.y0_samples is not None:
        paired = solution.y0_samples - candidate.measure.weights * (
            payoff.evaluate(candidate.ensemble) - candidate.fstar_integral
        )
        return Estimate(solution.y0.value - dual.value, Estimate.from_samples(paired).se)
    return Estimate(solution.y0.value - dual.value, math.hypot(solution.y0.se, dual.se))


def extract_optimal(solution: BsdeSolution) -> DualCandidate:
    """q* = grad f(Z) at every node of a solved BSDE."""
    if solution.z is None or solution.ensemble is None:
        raise ModelValidationError("The optimal density needs Z on the paths of an ensemble")
    ens = solution.ensemble
    spec = solution.spec
    q = np.empty_like(solution.z)
    for i in range(ens.grid.steps):
        q[:, i] = optimal_density(spec.context(ens, i), solution.z[:, i])
    return build_candidate(ens, spec.constraint, spec.alpha, q, "optimal")


def martingale_violation(candidate: DualCandidate, constraint: ConstraintSet) -> float:
    """Largest |q + theta - Proj_Gamma(q + theta)| over all nodes; zero for martingale measures."""
    ens = candidate.ensemble
    worst = 0.0
    for i in range(ens.grid.steps):
        u = candidate.q[:, i] + ens.theta[:, i]
        inside = project_barrier_cone(ImageSet(constraint, ens.sigma[:, i]), u)
        worst = max(worst, float(np.max(np.linalg.norm(u - inside, axis=-1))))
    return worst


def minimal_entropy_value(
    candidate: DualCandidate, payoff: Payoff, alpha: float, constraint: ConstraintSet, tol: float = 1e-8
) -> Estimate:
    """E^{Q^q}[F] - E[L ln L] / alpha for a candidate whose q + theta lies in the barrier cone."""
    if not constraint.is_cone:
        raise ModelValidationError("The minimal entropy value needs a cone constraint", field="constraint")
    violation = martingale_violation(candidate, constraint)
    if violation > tol:
        raise InfeasibleCandidateError(
            f"candidate {candidate.label} is not a martingale measure (violation {violation:.3e})"
        )
    weights = candidate.measure.weights
    log_w = candidate.measure.log_density[:, -1]
    samples = weights * (payoff.evaluate(candidate.ensemble) - log_w / alpha)
    return Estimate.from_samples(samples)


def minimal_entropy_price(claim: BsdeSolution, zero: BsdeSolution, payoff: Payoff) -> Estimate:
    """C_0 as the difference of the minimal entropy values of the two legs."""
    constraint = claim.spec.constraint
    alpha = claim.spec.alpha
    value_claim = minimal_entropy_value(extract_optimal(claim), payoff, alpha, constraint)
    value_zero = minimal_entropy_value(extract_optimal(zero), Payoff.constant(0.0), alpha, constraint)
    return value_claim - value_zero


def perturbed_candidate(
    solution: BsdeSolution, scale: float, seed: int, index: int = 0
) -> DualCandidate:
    """q* plus a bounded random shift, pulled back into the region where f* is finite."""
    base = extract_optimal(solution)
    ens = base.ensemble
    n, steps, m = base.q.shape
    rng = np.random.Generator(np.random.Philox(key=seed, counter=[0, 0, 1, index]))
    shift = scale * np.tanh(rng.standard_normal((n, 1, m))) * np.ones((1, steps, 1))
    q = base.q + shift
    constraint = solution.spec.constraint
    if constraint.is_cone:
        for i in range(steps):
            u = q[:, i] + ens.theta[:, i]
            q[:, i] = project_barrier_cone(ImageSet(constraint, ens.sigma[:, i]), u) - ens.theta[:, i]
    return build_candidate(ens, constraint, solution.spec.alpha, q, f"perturbed-{index}")


@dataclasses.dataclass(frozen=True)
class AuditRow:
    """One candidate of a weak duality audit."""

    candidate: str
    dual_value: float
    dual_se: float
    entropy: float
    entropy_se: float
    gap: float
    gap_se: float

    @property
    def weak_duality_ok(self) -> bool:
        """gap >= -3 SE."""
        return self.gap >= -N_SE * self.gap_se

    def as_dict(self) -> Dict[str, Any]:
        """Convert to a dict."""
        row = dataclasses.asdict(self)
        row["weak_duality_ok"] = self.weak_duality_ok
        return row


def dual_audit(
    solution: BsdeSolution,
    candidates: int,
    seed: int,
    scale: float = 0.5,
    extra: Optional[List[DualCandidate]] = None,
) -> List[AuditRow]:
    """Duality gaps of the optimal density, random perturbations of it, and extra candidates."""
    payoff = solution.spec.payoff
    pool = [extract_optimal(solution)]
    pool += [perturbed_candidate(solution, scale, seed, k) for k in range(candidates)]
    pool += list(extra or [])
    rows = []
    for cand in pool:
        dual = dual_value(cand, payoff)
        gap = duality_gap(solution, cand, payoff)
        rows.append(
            AuditRow(cand.label, dual.value, dual.se, cand.entropy.value, cand.entropy.direct.se, gap.value, gap.se)
        )
        if not rows[-1].weak_duality_ok:
            _LOGGER.warning("Weak duality violated by %s: gap %.6f +- %.6f", cand.label, gap.value, gap.se)
    return rows
