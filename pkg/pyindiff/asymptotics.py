"""Limits of the indifference price for small and large risk aversion."""
import asyncio
import dataclasses
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import fdm
from .drivers import DriverContext, price_generator, price_generator_lower
from .exceptions import ModelValidationError, UnboundedPayoffError
from .geometry import ConstraintSet, ImageSet, project_barrier_cone, project_image, sample_directions
from .model import MarketModel, Payoff, RiskParams, theta
from .models import Estimate, Verdict
from .paths import PathEnsemble, reweighted_expectation, stoch_exponential
from .pricing import PriceReport, run_price
from .regression import RegressionBasis
from .solver import (
    BsdeSolution,
    BsdeSpec,
    ClampPolicy,
    SolverDiagnostics,
    _backward,
    check_factor_model,
    factor_hamiltonian,
    factor_grid,
    solve_lsmc,
    state_names,
)
from .utils import default_threads, is_strictly_increasing
from .vec import vecDot, vecLen, vecLenSq, vecNormalize

_LOGGER = logging.getLogger(__name__)

DEFAULT_M_LADDER = (1.0, 2.0, 4.0, 8.0, 16.0)
DEFAULT_AUDIT_ALPHAS = (0.01, 0.05, 0.1, 0.25, 0.5, 1.0, 2.0, 5.0)
SATURATION_TOLERANCE = 1.0e-3
N_SE = 3.0


def _require_cone(constraint: ConstraintSet) -> None:
    if not constraint.is_cone:
        raise ModelValidationError(
            "Risk aversion limits need a cone constraint", field="constraint"
        )


@dataclasses.dataclass(frozen=True, eq=False)
class SmallAlphaResult:
    """E^{Q^Z}[F] together with the density that defines Q^Z."""

    price: Estimate
    density_mean: Estimate
    effective_sample_size: float
    q: np.ndarray
    reference: BsdeSolution

    def as_dict(self) -> Dict[str, Any]:
        """Convert to a dict."""
        return {
            "price": self.price.as_dict(),
            "density_mean": self.density_mean.as_dict(),
            "effective_sample_size": self.effective_sample_size,
        }


def limit_density_integrand(reference: BsdeSolution, constraint: ConstraintSet) -> np.ndarray:
    """Z^1(0) - Proj(Z^1(0) + theta) at every path and step."""
    ens = reference.ensemble
    if ens is None or reference.z is None:
        raise ModelValidationError("The limit density needs Z on the paths of an ensemble")
    q = np.empty_like(reference.z)
    for i in range(ens.grid.steps):
        point, _ = project_image(ImageSet(constraint, ens.sigma[:, i]), reference.z[:, i] + ens.theta[:, i])
        q[:, i] = reference.z[:, i] - point
    return q


def small_alpha_price(
    model: MarketModel,
    constraint: ConstraintSet,
    payoff: Payoff,
    ensemble: PathEnsemble,
    basis: RegressionBasis,
) -> SmallAlphaResult:
    """The alpha -> 0 limit of the price, an expectation under the measure built from Z^1(0)."""
    _require_cone(constraint)
    names = state_names(payoff, model)
    zero = BsdeSpec(Payoff.constant(0.0), constraint, 1.0)
    reference = solve_lsmc(zero, ensemble, basis, names)
    q = limit_density_integrand(reference, constraint)
    mc = stoch_exponential(q, ensemble)
    price = reweighted_expectation(mc, payoff.evaluate(ensemble))
    result = SmallAlphaResult(
        price, Estimate.from_samples(mc.weights), mc.effective_sample_size(), q, reference
    )
    _LOGGER.info("Small risk aversion limit of %s: %.6f +- %.6f", payoff.label, price.value, price.se)
    return result


def small_alpha_solution(
    model: MarketModel,
    constraint: ConstraintSet,
    payoff: Payoff,
    ensemble: PathEnsemble,
    basis: RegressionBasis,
) -> BsdeSolution:
    """Solve the linear BSDE C = F + int H^T (Z^1(0) - Proj(Z^1(0) + theta)) du - int H dB."""
    limit = small_alpha_price(model, constraint, payoff, ensemble, basis)
    q = limit.q
    names = state_names(payoff, model)
    diagnostics = SolverDiagnostics("lsmc-linear")
    y, z, y0, samples = _backward(
        ensemble, payoff.evaluate(ensemble), basis, names,
        lambda step, h: vecDot(h, q[:, step]), None, ClampPolicy(enabled=False), diagnostics,
    )
    spec = BsdeSpec(payoff, constraint, 1.0, ClampPolicy(enabled=False))
    return BsdeSolution(spec, y0, y, z, ensemble, diagnostics, y0_samples=samples)


def small_alpha_price_pde(
    model: MarketModel,
    constraint: ConstraintSet,
    payoff: Payoff,
    points: int = fdm.DEFAULT_POINTS,
    domain_sds: float = fdm.DEFAULT_DOMAIN_SDS,
    slices: int = 200,
) -> Tuple[float, float]:
    """Grid version for one factor models: u_t + (eta + kappa^T q(t, v)) u_v + u_vv / 2 = 0.

    Returns (value, Richardson error estimate).
    """
    _require_cone(constraint)
    check_factor_model(model, payoff)
    assert model.factor is not None
    kappa = model.factor.kappa
    grid = factor_grid(model, domain_sds, points)
    times = np.linspace(0.0, model.horizon, slices + 1)
    ref = fdm.solve_backward(
        np.zeros(grid.points), grid, model.horizon,
        factor_hamiltonian(model, constraint, 1.0), list(times),
    )

    def hamiltonian(t: float, v: np.ndarray, p: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        k = int(np.clip(np.searchsorted(-ref.times, -t), 0, len(ref.times) - 1))
        z_ref = ref.slope(k, v)[:, None] * kappa
        env = model.env(t, np.broadcast_to(model.s0, v.shape + (model.d,)), v)
        th = np.broadcast_to(theta(model, t, env), v.shape + (model.m,))
        sigma = np.broadcast_to(model.sigma_at(env), v.shape + (model.d, model.m))
        point, _ = project_image(ImageSet(constraint, sigma), z_ref + th)
        speed = model.factor_drift(t, v) + (z_ref - point) @ kappa
        return speed * p, speed

    def terminal(v: np.ndarray) -> np.ndarray:
        env = model.env(model.horizon, np.broadcast_to(model.s0, v.shape + (model.d,)), v)
        return np.broadcast_to(payoff.at_state(env), v.shape).astype(float)

    sol, error = fdm.richardson(terminal, grid, model.horizon, hamiltonian, model.factor.v0)
    return sol.value(model.factor.v0), error


@dataclasses.dataclass(frozen=True, eq=False)
class SuperreplicationSolution:
    """The large risk aversion limit along a ladder of control bounds m."""

    value: Estimate
    method: str
    m_values: List[Tuple[float, Estimate]]
    baseline: Estimate
    lower_bound_only: bool
    saturated: bool
    grid_v: Optional[np.ndarray] = None
    grid_u: Optional[np.ndarray] = None

    @property
    def premium(self) -> float:
        """Value in excess of the minimal martingale measure price."""
        return self.value.value - self.baseline.value

    @property
    def monotone_in_m(self) -> bool:
        """Values nondecreasing along the ladder, up to noise."""
        vals = [est for _, est in self.m_values]
        return all(b.value >= a.value - N_SE * math.hypot(a.se, b.se) - 1e-9 for a, b in zip(vals, vals[1:]))

    def as_dict(self) -> Dict[str, Any]:
        """Convert to a dict."""
        return {
            "value": self.value.as_dict(),
            "method": self.method,
            "m_values": [{"m": m, **est.as_dict()} for m, est in self.m_values],
            "baseline": self.baseline.as_dict(),
            "lower_bound_only": self.lower_bound_only,
            "saturated": self.saturated,
            "monotone_in_m": self.monotone_in_m,
        }


def hjb_hamiltonian(model: MarketModel, constraint: ConstraintSet, bound: float) -> fdm.Hamiltonian:
    """(eta - kappa^T theta) p + m dist(p kappa, sigma^T C)."""
    assert model.factor is not None
    kappa = model.factor.kappa
    static = "t" not in model.reads
    cache: Dict[int, Tuple[np.ndarray, ImageSet]] = {}

    def coefficients(t: float, v: np.ndarray) -> Tuple[np.ndarray, ImageSet]:
        if static and v.size in cache:
            return cache[v.size]
        env = model.env(t, np.broadcast_to(model.s0, v.shape + (model.d,)), v)
        th = np.broadcast_to(theta(model, t, env), v.shape + (model.m,))
        sigma = np.broadcast_to(model.sigma_at(env), v.shape + (model.d, model.m))
        out = (model.factor_drift(t, v) - th @ kappa, ImageSet(constraint, sigma))
        if static:
            cache[v.size] = out
        return out

    def hamiltonian(t: float, v: np.ndarray, p: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        speed, img = coefficients(t, v)
        w = p[:, None] * kappa
        point, _ = project_image(img, w)
        residual = w - point
        dist = vecLen(residual)
        slope = np.where(dist > 0, (residual @ kappa) / np.maximum(dist, 1e-300), 0.0)
        return speed * p + bound * dist, speed + bound * slope

    return hamiltonian


def _hjb_value(model: MarketModel, constraint: ConstraintSet, payoff: Payoff, bound: float,
               points: int, domain_sds: float) -> Tuple[float, float, np.ndarray, np.ndarray]:
    assert model.factor is not None
    grid = factor_grid(model, domain_sds, points)

    def terminal(v: np.ndarray) -> np.ndarray:
        env = model.env(model.horizon, np.broadcast_to(model.s0, v.shape + (model.d,)), v)
        return np.broadcast_to(payoff.at_state(env), v.shape).astype(float)

    sol, error = fdm.richardson(terminal, grid, model.horizon, hjb_hamiltonian(model, constraint, bound), model.factor.v0)
    return sol.value(model.factor.v0), error, grid.v, sol.u0


async def async_large_alpha_price(
    model: MarketModel,
    constraint: ConstraintSet,
    payoff: Payoff,
    m_ladder: Sequence[float] = DEFAULT_M_LADDER,
    ensemble: Optional[PathEnsemble] = None,
    points: int = fdm.DEFAULT_POINTS,
    domain_sds: float = fdm.DEFAULT_DOMAIN_SDS,
    directions: int = 16,
    seed: int = 0,
    threads: Optional[int] = None,
) -> SuperreplicationSolution:
    """Superreplication value sup over barrier cone controls |v| <= m of E^{Q^v}[F], m along a ladder."""
    _require_cone(constraint)
    if payoff.bounds is None:
        raise UnboundedPayoffError(
            f"The large risk aversion limit needs a bounded payoff, {payoff.label} declares no bounds"
        )
    ladder = sorted(float(m) for m in m_ladder)
    if not ladder or ladder[0] < 0:
        raise ModelValidationError("need nonnegative control bounds", field="asymptotics.m_ladder")
    grid_capable = model.factor is not None and payoff.terminal is not None and set(payoff.reads) <= {"v"} \
        and set(model.reads) <= {"v", "t"}
    loop = asyncio.get_running_loop()
    with ThreadPoolExecutor(max_workers=default_threads(threads)) as pool:
        if grid_capable:
            jobs = [
                loop.run_in_executor(pool, _hjb_value, model, constraint, payoff, m, points, domain_sds)
                for m in [0.0] + ladder
            ]
            results = await asyncio.gather(*jobs)
            base_value, base_err, _, _ = results[0]
            values = [(m, Estimate(val, err)) for m, (val, err, _, _) in zip(ladder, results[1:])]
            grid_v = results[-1][2]
            grid_u = np.stack([r[3] for r in results[1:]])
            baseline = Estimate(base_value, base_err)
            method, lower_only = "hjb", False
        else:
            if ensemble is None:
                raise ModelValidationError("The control lattice needs an ensemble")
            jobs = [
                loop.run_in_executor(pool, _lattice_value, ensemble, constraint, payoff, m, directions, seed)
                for m in [0.0] + ladder
            ]
            results = await asyncio.gather(*jobs)
            baseline = results[0]
            values = list(zip(ladder, results[1:]))
            grid_v = grid_u = None
            method, lower_only = "lattice", True
    last = values[-1][1]
    saturated = len(values) > 1 and abs(last.value - values[-2][1].value) <= SATURATION_TOLERANCE + last.se
    if not saturated:
        _LOGGER.warning("Control ladder has not saturated: %s", [(m, e.value) for m, e in values])
    return SuperreplicationSolution(last, method, values, baseline, lower_only, saturated, grid_v, grid_u)


def large_alpha_price(*args: Any, **kwargs: Any) -> SuperreplicationSolution:
    """Synchronous wrapper of async_large_alpha_price."""
    return asyncio.run(async_large_alpha_price(*args, **kwargs))


def _lattice_value(
    ensemble: PathEnsemble, constraint: ConstraintSet, payoff: Payoff, bound: float, directions: int, seed: int
) -> Estimate:
    """Best E^{Q^v}[F] over controls v = m normalize(Proj_Gamma(u)) for a lattice of directions u."""
    values = payoff.evaluate(ensemble)
    steps = ensemble.grid.steps
    best: Optional[Estimate] = None
    lattice = sample_directions(ensemble.model.m, directions, seed) if bound > 0 else np.zeros((1, ensemble.model.m))
    for u in lattice:
        v = np.empty_like(ensemble.theta)
        for i in range(steps):
            img = ImageSet(constraint, ensemble.sigma[:, i])
            v[:, i] = bound * vecNormalize(project_barrier_cone(img, np.broadcast_to(u, ensemble.theta[:, i].shape)))
        est = reweighted_expectation(stoch_exponential(v - ensemble.theta, ensemble), values)
        if best is None or est.value > best.value:
            best = est
    assert best is not None
    return best


@dataclasses.dataclass(frozen=True)
class SweepReport:
    """Prices along a strictly increasing grid of risk aversions."""

    alphas: List[float]
    prices: List[Estimate]
    monotone: Optional[bool]
    small_alpha: Optional[Estimate]
    large_alpha: Optional[Estimate]
    corridor_ok: List[bool]
    reports: List[PriceReport] = dataclasses.field(default_factory=list)

    @property
    def verdict(self) -> Verdict:
        """PASS when monotone and inside the corridor everywhere."""
        if self.monotone is False or not all(self.corridor_ok):
            return Verdict.FAIL
        return Verdict.PASS

    @property
    def spread(self) -> float:
        """max - min of the prices."""
        vals = [p.value for p in self.prices]
        return max(vals) - min(vals)

    def rows(self) -> List[Dict[str, Any]]:
        """One row per alpha."""
        return [
            {
                "alpha": a,
                "price": p.value,
                "price_se": p.se,
                "corridor_ok": ok,
                "small_alpha": None if self.small_alpha is None else self.small_alpha.value,
                "small_alpha_se": None if self.small_alpha is None else self.small_alpha.se,
                "large_alpha": None if self.large_alpha is None else self.large_alpha.value,
                "large_alpha_se": None if self.large_alpha is None else self.large_alpha.se,
            }
            for a, p, ok in zip(self.alphas, self.prices, self.corridor_ok)
        ]

    def as_dict(self) -> Dict[str, Any]:
        """Convert to a dict."""
        return {
            "alphas": self.alphas,
            "prices": [p.as_dict() for p in self.prices],
            "monotone": self.monotone,
            "small_alpha": None if self.small_alpha is None else self.small_alpha.as_dict(),
            "large_alpha": None if self.large_alpha is None else self.large_alpha.as_dict(),
            "corridor_ok": self.corridor_ok,
            "spread": self.spread,
            "verdict": self.verdict.value,
        }


async def async_alpha_sweep(
    model: MarketModel,
    constraint: ConstraintSet,
    payoff: Payoff,
    alphas: Sequence[float],
    ensemble: Optional[PathEnsemble],
    basis: RegressionBasis,
    params: Optional[RiskParams] = None,
    method: str = "lsmc",
    small_alpha: Optional[Estimate] = None,
    large_alpha: Optional[Estimate] = None,
    threads: Optional[int] = None,
    tolerance: float = 1e-2,
) -> SweepReport:
    """Price at every alpha on the shared ensemble, in parallel, and check monotonicity."""
    grid = [float(a) for a in alphas]
    if not is_strictly_increasing(grid):
        raise ModelValidationError("must be strictly increasing", field="risk.alpha_grid")
    base = params or RiskParams(alpha=grid[0])
    loop = asyncio.get_running_loop()
    with ThreadPoolExecutor(max_workers=default_threads(threads)) as pool:
        jobs = [
            loop.run_in_executor(
                pool, run_price, model, constraint, base.with_alpha(a), payoff, ensemble, basis, method
            )
            for a in grid
        ]
        runs = await asyncio.gather(*jobs)
    reports = [run.report for run in runs]
    prices = [r.price for r in reports]
    monotone: Optional[bool] = None
    if constraint.is_cone and payoff.bounds is not None:
        monotone = all(
            b.value >= a.value - N_SE * math.hypot(a.se, b.se) - max(ra.tolerance, rb.tolerance) / N_SE
            for a, b, ra, rb in zip(prices, prices[1:], reports, reports[1:])
        )
        if not monotone:
            _LOGGER.warning("Prices are not nondecreasing in alpha: %s", [p.value for p in prices])
    corridor_ok = []
    for p, r in zip(prices, reports):
        ok = True
        if small_alpha is not None:
            ok &= p.value >= small_alpha.value - N_SE * math.hypot(p.se, small_alpha.se) - r.tolerance
        if large_alpha is not None:
            ok &= p.value <= large_alpha.value + large_alpha.se + tolerance + r.tolerance
        corridor_ok.append(bool(ok))
    return SweepReport(grid, prices, monotone, small_alpha, large_alpha, corridor_ok, reports)


def alpha_sweep(*args: Any, **kwargs: Any) -> SweepReport:
    """Synchronous wrapper of async_alpha_sweep."""
    return asyncio.run(async_alpha_sweep(*args, **kwargs))


@dataclasses.dataclass(frozen=True)
class GeneratorAudit:
    """Violation counts of the price generator checks."""

    samples: int
    alphas: List[float]
    bound_violations: int
    monotonicity_violations: int
    rate_violations: int
    in_cone_violations: int
    max_radius_ratio: float

    @property
    def passed(self) -> bool:
        """True when no check was violated."""
        return not (
            self.bound_violations or self.monotonicity_violations or self.rate_violations or self.in_cone_violations
        )

    def as_dict(self) -> Dict[str, Any]:
        """Convert to a dict."""
        out = dataclasses.asdict(self)
        out["passed"] = self.passed
        return out


def generator_limit_audit(
    ctx: DriverContext,
    samples: int = 10_000,
    alphas: Sequence[float] = DEFAULT_AUDIT_ALPHAS,
    seed: int = 0,
    tol: float = 1e-9,
) -> GeneratorAudit:
    """Two-sided bounds, monotonicity in alpha, the O(alpha) limit and g <= 0 for h in the cone."""
    if not ctx.is_cone:
        raise ModelValidationError("The generator audit needs a cone constraint", field="constraint")
    ladder = sorted(float(a) for a in alphas)
    rng = np.random.Generator(np.random.Philox(key=seed))
    h = rng.standard_normal((samples, ctx.m))
    z_ref = rng.standard_normal((samples, ctx.m))
    theta_b = np.broadcast_to(ctx.theta, (samples, ctx.m))
    lower = price_generator_lower(ctx, h, z_ref)
    radius = vecLen(z_ref) + vecLen(theta_b)
    in_cone, _ = project_image(ctx.image, rng.standard_normal((samples, ctx.m)))
    bound_v = mono_v = rate_v = cone_v = 0
    previous = None
    for a in ladder:
        g = price_generator(ctx.with_alpha(a), h, z_ref)
        scale = tol * (1.0 + np.abs(g) + vecLenSq(h) + radius**2)
        bound_v += int(np.count_nonzero(g < lower - scale))
        if a <= 1.0:
            upper = 0.5 * vecLenSq(h) + vecLen(h) * radius
            bound_v += int(np.count_nonzero(g > upper + scale))
        rate_v += int(np.count_nonzero(g - lower > 0.5 * a * vecLenSq(h) + scale))
        if previous is not None:
            mono_v += int(np.count_nonzero(g < previous - scale))
        previous = g
        g_in = price_generator(ctx.with_alpha(a), in_cone, z_ref)
        cone_v += int(np.count_nonzero(g_in > tol * (1.0 + vecLenSq(in_cone) + radius**2)))
    x = z_ref + theta_b
    point, _ = project_image(ctx.image, x)
    # |x - Proj(x)| <= |x| <= |Z^1(0)| + |theta|
    ratio = float(np.max(vecLen(x - point) / np.maximum(radius, 1e-300)))
    audit = GeneratorAudit(samples, ladder, bound_v, mono_v, rate_v, cone_v, ratio)
    if not audit.passed:
        _LOGGER.warning("Generator audit found violations: %s", audit)
    return audit
