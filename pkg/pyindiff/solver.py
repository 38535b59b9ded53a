"""Numerical solution of the quadratic BSDEs.

Y_t = F + int_t^T f(Z_s) ds - int_t^T Z_s^T dB_s is solved by backward least
squares Monte Carlo on a PathEnsemble, or on a one dimensional grid when the
market is driven by a single factor and the payoff reads the factor only.
"""
import dataclasses
import logging
import math
import time
from typing import Any, Callable, Dict, FrozenSet, List, Optional, Tuple

import numpy as np

from . import fdm
from .drivers import DriverContext, optimal_density, price_generator, primal_driver
from .exceptions import ModelValidationError, NonFiniteError
from .geometry import ConstraintSet, ImageSet
from .model import MarketModel, Payoff, sampled_moment, theta
from .models import Estimate, Verdict
from .paths import PathEnsemble, coarsen, stoch_exponential
from .regression import RegressionBasis, StepRegression
from .vec import vecDot, vecLenSq

_LOGGER = logging.getLogger(__name__)

CLAMP_FAIL_FRACTION = 0.01

# (step, Z of shape (N, m)) -> driver values (N,)
StepDriver = Callable[[int, np.ndarray], np.ndarray]


@dataclasses.dataclass(frozen=True)
class ClampPolicy:
    """Clamp Y into the bound corridor widened by max(abs_slack, rel_slack |bound|)."""

    enabled: bool = True
    abs_slack: float = 0.05
    rel_slack: float = 0.05

    def as_dict(self) -> Dict[str, Any]:
        """Convert to a dict."""
        return dataclasses.asdict(self)


@dataclasses.dataclass(frozen=True, eq=False)
class BsdeSpec:
    """Terminal payoff, constraint and risk aversion of one BSDE with the exponential utility driver."""

    payoff: Payoff
    constraint: ConstraintSet
    alpha: float
    clamp: ClampPolicy = ClampPolicy()

    def __post_init__(self) -> None:
        """Check alpha."""
        if not self.alpha > 0:
            raise ModelValidationError("must be positive", field="risk.alpha")

    def with_payoff(self, payoff: Payoff) -> "BsdeSpec":
        """Same BSDE, other terminal condition."""
        return dataclasses.replace(self, payoff=payoff)

    def with_alpha(self, alpha: float) -> "BsdeSpec":
        """Same BSDE, other risk aversion."""
        return dataclasses.replace(self, alpha=alpha)

    def context(self, ensemble: PathEnsemble, step: int) -> DriverContext:
        """Driver context on every path at a step."""
        return DriverContext.at_step(ensemble, self.constraint, self.alpha, step)


@dataclasses.dataclass
class SolverDiagnostics:
    """Per-run numerics of a BSDE solve."""

    method: str
    conditions: List[float] = dataclasses.field(default_factory=list)
    degrees: List[int] = dataclasses.field(default_factory=list)
    downgrades: int = 0
    clamp_count: int = 0
    clamp_total: int = 0
    step_residuals: List[float] = dataclasses.field(default_factory=list)
    fdm_steps: int = 0
    refinements: int = 0
    richardson: float = 0.0
    seconds: float = 0.0

    @property
    def clamp_fraction(self) -> float:
        """Share of clamped (path, step) values."""
        return self.clamp_count / self.clamp_total if self.clamp_total else 0.0

    @property
    def verdict(self) -> Verdict:
        """FAIL when more than 1% of the values were clamped."""
        return Verdict.FAIL if self.clamp_fraction > CLAMP_FAIL_FRACTION else Verdict.PASS

    def as_dict(self) -> Dict[str, Any]:
        """Convert to a dict with summary statistics only."""
        return {
            "method": self.method,
            "max_condition": max(self.conditions, default=1.0),
            "min_degree": min(self.degrees, default=0),
            "downgrades": self.downgrades,
            "clamp_count": self.clamp_count,
            "clamp_fraction": self.clamp_fraction,
            "max_step_residual": max(self.step_residuals, default=0.0),
            "fdm_steps": self.fdm_steps,
            "refinements": self.refinements,
            "richardson": self.richardson,
            "seconds": self.seconds,
            "verdict": self.verdict.value,
        }


@dataclasses.dataclass(frozen=True, eq=False)
class BsdeSolution:
    """(Y, Z) on the paths of an ensemble and the initial value Y_0.

    y has shape (N, K+1) and z (N, K, m). A grid solution without an ensemble
    has y and z set to None and keeps the grid in fdm_solution.
    """

    spec: BsdeSpec
    y0: Estimate
    y: Optional[np.ndarray]
    z: Optional[np.ndarray]
    ensemble: Optional[PathEnsemble]
    diagnostics: SolverDiagnostics
    fdm_solution: Optional[fdm.FdmSolution] = None
    y0_samples: Optional[np.ndarray] = None

    @property
    def tolerance(self) -> float:
        """Standard error plus the grid error estimate."""
        return self.y0.se + self.diagnostics.richardson


@dataclasses.dataclass(frozen=True)
class CorridorBounds:
    """Lower and upper explicit bounds of Y_0."""

    lower: Estimate
    upper: Estimate
    diverging: bool = False

    def as_dict(self) -> Dict[str, Any]:
        """Convert to a dict."""
        return {"lower": self.lower.as_dict(), "upper": self.upper.as_dict(), "diverging": self.diverging}


def state_names(payoff: Payoff, model: MarketModel) -> FrozenSet[str]:
    """Variables of the regression state, payoff reads and model reads together."""
    names = set(payoff.reads) | set(model.reads)
    if "s" in names:
        names.discard("s")
        names.add("s1")
    if "v" in names and model.factor is None:
        names.discard("v")
    return frozenset(names - {"t"})


def regression_features(ensemble: PathEnsemble, names: FrozenSet[str], step: int) -> np.ndarray:
    """Feature matrix (N, p) at a node: ln S for prices, V, and B."""
    columns = []
    for name in sorted(names):
        if name.startswith("s"):
            columns.append(np.log(ensemble.s[:, step, int(name[1:]) - 1]))
        elif name == "v":
            assert ensemble.v is not None
            columns.append(ensemble.v[:, step])
        elif name.startswith("b"):
            columns.append(ensemble.b[:, step, int(name[1:]) - 1])
    if not columns:
        return np.zeros((ensemble.n_paths, 0))
    return np.stack(columns, axis=1)


def _backward(
    ensemble: PathEnsemble,
    terminal: np.ndarray,
    basis: RegressionBasis,
    names: FrozenSet[str],
    driver: StepDriver,
    corridor: Optional[Callable[[int, StepRegression], Tuple[np.ndarray, np.ndarray]]],
    clamp: ClampPolicy,
    diagnostics: SolverDiagnostics,
) -> Tuple[np.ndarray, np.ndarray, Estimate, np.ndarray]:
    """Explicit backward Euler with regression; returns (Y, Z, Y_0, step-0 samples)."""
    n, steps, m = ensemble.dB.shape
    dt = ensemble.grid.dt
    y = np.empty((n, steps + 1))
    z = np.empty((n, steps, m))
    y[:, steps] = terminal
    y0 = Estimate.exact(float(np.mean(terminal)))
    samples = terminal
    for i in range(steps - 1, -1, -1):
        reg = StepRegression(basis, regression_features(ensemble, names, i))
        diagnostics.conditions.append(reg.condition)
        diagnostics.degrees.append(reg.degree)
        diagnostics.downgrades += int(reg.downgraded)
        nxt = y[:, i + 1]
        # centered by E[Y_{i+1} | X_i]
        centered = nxt - reg.fit_predict(nxt)
        z[:, i] = reg.fit_predict(centered[:, None] * ensemble.dB[:, i] / dt)
        target = nxt + driver(i, z[:, i]) * dt
        if not np.all(np.isfinite(target)):
            bad = int(np.argmin(np.isfinite(target)))
            raise NonFiniteError("BSDE value is not finite", where={"path": bad, "step": i})
        fitted = reg.fit_predict(target)
        diagnostics.step_residuals.append(float(np.sqrt(np.mean((target - fitted) ** 2))))
        if corridor is not None and clamp.enabled:
            lower, upper = corridor(i, reg)
            lo = lower - np.maximum(clamp.abs_slack, clamp.rel_slack * np.abs(lower))
            hi = upper + np.maximum(clamp.abs_slack, clamp.rel_slack * np.abs(upper))
            outside = (fitted < lo) | (fitted > hi)
            diagnostics.clamp_count += int(np.count_nonzero(outside))
            fitted = np.clip(fitted, lo, hi)
        diagnostics.clamp_total += n
        y[:, i] = fitted
        if i == 0:
            samples = target
            y0 = Estimate(float(np.mean(fitted)), Estimate.from_samples(target).se)
    if diagnostics.verdict is Verdict.FAIL:
        _LOGGER.warning(
            "%.2f%% of the BSDE values were clamped into the bound corridor",
            100 * diagnostics.clamp_fraction,
        )
    return y, z, y0, samples


class _Corridor:
    """Conditional versions of the explicit bounds, regressed at each step.

    upper_i = 1/alpha ln E[exp(alpha F+) | X_i], lower_i = -E[L_T/L_i (F- + int_i^T |theta|^2/(2 alpha)) | X_i]
    with L the density of the minimal martingale measure.
    """

    def __init__(self, ensemble: PathEnsemble, values: np.ndarray, alpha: float) -> None:
        self.alpha = alpha
        pos = np.maximum(values, 0.0)
        self.shift = float(np.max(alpha * pos))
        self.exp_pos = np.exp(alpha * pos - self.shift)
        mc = stoch_exponential(-ensemble.theta, ensemble)
        self.log_density = mc.log_density
        cost = vecLenSq(ensemble.theta) * ensemble.grid.dt / (2 * alpha)
        self.cost_to_go = np.concatenate(
            [np.cumsum(cost[:, ::-1], axis=1)[:, ::-1], np.zeros((values.size, 1))], axis=1
        )
        self.neg = np.maximum(-values, 0.0)

    def __call__(self, step: int, reg: StepRegression) -> Tuple[np.ndarray, np.ndarray]:
        moment = reg.fit_predict(self.exp_pos)
        with np.errstate(divide="ignore", invalid="ignore"):
            upper = np.where(moment > 0, (np.log(np.maximum(moment, 1e-300)) + self.shift) / self.alpha, np.inf)
        ratio = np.exp(self.log_density[:, -1] - self.log_density[:, step])
        lower = -reg.fit_predict(ratio * (self.neg + self.cost_to_go[:, step]))
        return lower, upper


def solve_lsmc(
    spec: BsdeSpec,
    ensemble: PathEnsemble,
    basis: RegressionBasis,
    names: Optional[FrozenSet[str]] = None,
) -> BsdeSolution:
    """Backward least squares Monte Carlo for BSDE(F, f^alpha)."""
    started = time.perf_counter()
    names = state_names(spec.payoff, ensemble.model) if names is None else names
    terminal = spec.payoff.evaluate(ensemble)
    contexts: Dict[int, DriverContext] = {}

    def driver(step: int, z: np.ndarray) -> np.ndarray:
        ctx = contexts.setdefault(step, spec.context(ensemble, step))
        return primal_driver(ctx, z)

    diagnostics = SolverDiagnostics("lsmc")
    corridor = _Corridor(ensemble, terminal, spec.alpha) if spec.clamp.enabled else None
    y, z, y0, samples = _backward(ensemble, terminal, basis, names, driver, corridor, spec.clamp, diagnostics)
    diagnostics.seconds = time.perf_counter() - started
    _LOGGER.info(
        "LSMC solve of %s (alpha=%g, %s): Y0 = %.6f +- %.6f in %.2fs",
        spec.payoff.label, spec.alpha, spec.constraint.kind.value, y0.value, y0.se, diagnostics.seconds,
    )
    return BsdeSolution(spec, y0, y, z, ensemble, diagnostics, y0_samples=samples)


def solve_price_lsmc(
    spec: BsdeSpec,
    ensemble: PathEnsemble,
    basis: RegressionBasis,
    reference: BsdeSolution,
    names: Optional[FrozenSet[str]] = None,
) -> BsdeSolution:
    """Solve C = F + int (g^alpha(H, Z^1(0)) - H^T theta) du - int H dB directly.

    reference must be the solution of BSDE(0, f^1) on the same ensemble.
    """
    if not spec.constraint.is_cone:
        raise ModelValidationError("The price generator needs a cone constraint", field="constraint")
    if reference.z is None or reference.ensemble is not ensemble or reference.spec.alpha != 1.0:
        raise ModelValidationError("reference must be BSDE(0, f^1) solved on the same ensemble")
    started = time.perf_counter()
    names = state_names(spec.payoff, ensemble.model) if names is None else names
    terminal = spec.payoff.evaluate(ensemble)
    z_ref = reference.z

    def driver(step: int, h: np.ndarray) -> np.ndarray:
        ctx = spec.context(ensemble, step)
        return price_generator(ctx, h, z_ref[:, step]) - vecDot(h, ctx.theta)

    diagnostics = SolverDiagnostics("lsmc-price")
    y, z, y0, samples = _backward(ensemble, terminal, basis, names, driver, None, spec.clamp, diagnostics)
    diagnostics.seconds = time.perf_counter() - started
    _LOGGER.info("Price BSDE of %s (alpha=%g): C0 = %.6f +- %.6f", spec.payoff.label, spec.alpha, y0.value, y0.se)
    return BsdeSolution(spec, y0, y, z, ensemble, diagnostics, y0_samples=samples)


def bounds(spec: BsdeSpec, ensemble: PathEnsemble) -> CorridorBounds:
    """-E^{Q^theta}[F- + int |theta|^2/(2 alpha)] <= Y_0 <= 1/alpha ln E[exp(alpha F+)]."""
    values = spec.payoff.evaluate(ensemble)
    a = spec.alpha
    mc = stoch_exponential(-ensemble.theta, ensemble)
    cost = np.sum(vecLenSq(ensemble.theta), axis=1) * ensemble.grid.dt / (2 * a)
    lower_samples = -mc.weights * (np.maximum(-values, 0.0) + cost)
    lower = Estimate.from_samples(lower_samples)
    shift = float(np.max(a * np.maximum(values, 0.0)))
    with np.errstate(over="ignore"):
        moment, diverging = sampled_moment(np.exp(a * np.maximum(values, 0.0) - shift))
    if not (moment.value > 0 and math.isfinite(moment.value)):
        upper = Estimate(math.inf, math.inf)
    else:
        upper = Estimate((math.log(moment.value) + shift) / a, moment.se / (a * moment.value))
    if diverging:
        _LOGGER.warning("Upper bound estimator for %s looks heavy tailed", spec.payoff.label)
    return CorridorBounds(lower, upper, diverging)


def _factor_context(model: MarketModel, constraint: ConstraintSet, alpha: float,
                    t: float, v: np.ndarray) -> DriverContext:
    env = model.env(t, np.broadcast_to(model.s0, v.shape + (model.d,)), v)
    th = np.broadcast_to(theta(model, t, env), v.shape + (model.m,))
    sigma = np.broadcast_to(model.sigma_at(env), v.shape + (model.d, model.m))
    return DriverContext(alpha, th, ImageSet(constraint, sigma))


def check_factor_model(model: MarketModel, payoff: Optional[Payoff] = None) -> None:
    """Raise unless the market is a one factor model and the payoff reads the factor only."""
    if model.factor is None:
        raise ModelValidationError("The grid solver needs a factor block", field="model.factor")
    if not set(model.reads) <= {"v", "t"}:
        raise ModelValidationError(
            f"The grid solver needs coefficients of (t, v), they read {sorted(model.reads)}",
            field="model",
        )
    if payoff is not None and (payoff.terminal is None or not set(payoff.reads) <= {"v"}):
        raise ModelValidationError(
            f"The grid solver needs a terminal payoff of v, {payoff.label} reads {sorted(payoff.reads)}",
            field="payoff",
        )


def factor_grid(model: MarketModel, domain_sds: float = fdm.DEFAULT_DOMAIN_SDS,
                points: int = fdm.DEFAULT_POINTS) -> fdm.SpaceGrid:
    """Interval of +- domain_sds standard deviations of V_T around its drift-shifted mean."""
    assert model.factor is not None
    v0 = model.factor.v0
    shift = float(model.factor_drift(0.0, np.array(v0))) * model.horizon
    half = domain_sds * math.sqrt(model.horizon) + abs(shift)
    return fdm.SpaceGrid(v0 + shift - half, v0 + shift + half, points)


def factor_hamiltonian(model: MarketModel, constraint: ConstraintSet, alpha: float) -> fdm.Hamiltonian:
    """H(t, v, p) = eta p + f(kappa p) and its p-derivative eta + kappa^T q*(kappa p)."""
    assert model.factor is not None
    kappa = model.factor.kappa
    cache: Dict[int, DriverContext] = {}
    static = "t" not in model.reads

    def hamiltonian(t: float, v: np.ndarray, p: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        if static:
            ctx = cache.get(v.size)
            if ctx is None:
                ctx = cache[v.size] = _factor_context(model, constraint, alpha, 0.0, v)
        else:
            ctx = _factor_context(model, constraint, alpha, t, v)
        zvec = p[:, None] * kappa
        eta = model.factor_drift(t, v)
        q = optimal_density(ctx, zvec)
        assert isinstance(q, np.ndarray)
        return eta * p + primal_driver(ctx, zvec), eta + q @ kappa

    return hamiltonian


def solve_pde_1d(
    spec: BsdeSpec,
    model: MarketModel,
    ensemble: Optional[PathEnsemble] = None,
    points: int = fdm.DEFAULT_POINTS,
    domain_sds: float = fdm.DEFAULT_DOMAIN_SDS,
) -> BsdeSolution:
    """u_t + eta u_v + 1/2 u_vv + f(kappa u_v) = 0, u(T) = F; Y = u(t, V), Z = kappa u_v."""
    check_factor_model(model, spec.payoff)
    assert model.factor is not None
    started = time.perf_counter()
    grid = factor_grid(model, domain_sds, points)
    s_t = model.s0

    def terminal(v: np.ndarray) -> np.ndarray:
        env = model.env(model.horizon, np.broadcast_to(s_t, v.shape + (model.d,)), v)
        return np.broadcast_to(spec.payoff.at_state(env), v.shape).astype(float)

    save = list(ensemble.grid.nodes) if ensemble is not None else None
    sol, error = fdm.richardson(
        terminal, grid, model.horizon, factor_hamiltonian(model, spec.constraint, spec.alpha),
        model.factor.v0, save,
    )
    diagnostics = SolverDiagnostics(
        "pde", fdm_steps=sol.steps, refinements=sol.refinements, richardson=error
    )
    y = z = None
    if ensemble is not None:
        assert ensemble.v is not None
        steps = ensemble.grid.steps
        y = np.empty((ensemble.n_paths, steps + 1))
        z = np.empty((ensemble.n_paths, steps, model.m))
        for i in range(steps + 1):
            k = steps - i
            y[:, i] = sol.at(k, ensemble.v[:, i])
            if i < steps:
                z[:, i] = sol.slope(k, ensemble.v[:, i])[:, None] * model.factor.kappa
        y[:, steps] = spec.payoff.evaluate(ensemble)
    y0 = Estimate.exact(sol.value(model.factor.v0))
    diagnostics.seconds = time.perf_counter() - started
    _LOGGER.info(
        "Grid solve of %s (alpha=%g): Y0 = %.6f, Richardson %.2e, %d steps",
        spec.payoff.label, spec.alpha, y0.value, error, sol.steps,
    )
    return BsdeSolution(spec, y0, y, z, ensemble, diagnostics, sol)


def timestep_study(spec: BsdeSpec, ensemble: PathEnsemble, basis: RegressionBasis) -> Tuple[BsdeSolution, BsdeSolution]:
    """Solve on the ensemble and on the same Brownian paths with half the steps."""
    fine = solve_lsmc(spec, ensemble, basis)
    coarse = solve_lsmc(spec, coarsen(ensemble, 2), basis)
    return fine, coarse
