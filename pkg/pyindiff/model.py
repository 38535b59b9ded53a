"""Market models, payoffs, risk parameters and the integrability diagnostics."""
import dataclasses
import logging
import math
from enum import Enum
from typing import Any, Callable, Dict, FrozenSet, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import qmc

from .exceptions import ModelValidationError, NonFiniteError, SingularVolatilityError
from .expressions import Expression, Value, state_variables
from .models import Estimate, Verdict
from .vec import matTVec, matVec, vecLen

_LOGGER = logging.getLogger(__name__)

# sigma sigma^T with a larger condition number is treated as singular
SINGULAR_CONDITION = 1.0e12
KAPPA_TOLERANCE = 1.0e-9
BOUNDS_TOLERANCE = 1.0e-9
VALIDATION_SAMPLES = 10_000

Env = Mapping[str, Value]
Coefficient = Callable[[Env], np.ndarray]


def batch_shape(env: Env) -> Tuple[int, ...]:
    """Common shape of all array valued bindings."""
    return np.broadcast_shapes(*(np.shape(v) for v in env.values()))


def expression_vector(exprs: Sequence[Expression]) -> Coefficient:
    """Stack scalar expressions into a (..., n) coefficient."""

    def evaluate(env: Env) -> np.ndarray:
        shape = batch_shape(env)
        return np.stack([np.broadcast_to(e.evaluate(env), shape) for e in exprs], axis=-1)

    return evaluate


def expression_matrix(rows: Sequence[Sequence[Expression]]) -> Coefficient:
    """Stack rows of scalar expressions into a (..., n, k) coefficient."""
    row_fns = [expression_vector(row) for row in rows]

    def evaluate(env: Env) -> np.ndarray:
        return np.stack([fn(env) for fn in row_fns], axis=-2)

    return evaluate


@dataclasses.dataclass(frozen=True, eq=False)
class FactorBlock:
    """A one dimensional factor dV = eta(t, V)dt + kappa^T dB."""

    eta: Callable[[float, Value], Value]
    kappa: np.ndarray
    v0: float
    label: str = "eta"

    @property
    def is_driftless(self) -> bool:
        """Return True if eta vanishes at a few sample points."""
        sample = np.linspace(-3.0, 3.0, 7) + self.v0
        return bool(np.allclose(np.broadcast_to(self.eta(0.0, sample), sample.shape), 0.0))


@dataclasses.dataclass(frozen=True)
class CoefficientBounds:
    """Declared bounds for |b|, |sigma| and |theta|."""

    drift: float = math.inf
    volatility: float = math.inf
    theta: float = math.inf


@dataclasses.dataclass(frozen=True, eq=False)
class MarketModel:
    """A Markovian market with d stocks driven by an m dimensional Brownian motion."""

    m: int
    d: int
    horizon: float
    s0: np.ndarray
    drift: Coefficient
    volatility: Coefficient
    factor: Optional[FactorBlock] = None
    bounds: CoefficientBounds = CoefficientBounds()
    state_box: Dict[str, Tuple[float, float]] = dataclasses.field(default_factory=dict)
    reads: FrozenSet[str] = frozenset()
    label: str = "market"
    # set by build_example: (theta(v), sigma(v)) scalar callables
    example: Optional[Tuple[Callable[[Value], Value], Callable[[Value], Value]]] = None

    def __post_init__(self) -> None:
        """Check the dimensions."""
        if self.m < 1 or self.d < 1 or self.d > self.m:
            raise ModelValidationError(
                f"Need 1 <= d <= m, got d={self.d}, m={self.m}", field="model"
            )
        if self.horizon <= 0:
            raise ModelValidationError("must be positive", field="model.horizon")
        if np.shape(self.s0) != (self.d,) or np.any(np.asarray(self.s0) <= 0):
            raise ModelValidationError(
                f"need {self.d} positive initial prices", field="model.s0"
            )
        if self.factor is not None:
            kappa = np.asarray(self.factor.kappa, dtype=float)
            if kappa.shape != (self.m,):
                raise ModelValidationError(
                    f"kappa must have {self.m} entries", field="model.kappa"
                )
            norm2 = float(kappa @ kappa)
            if abs(norm2 - 1.0) > KAPPA_TOLERANCE:
                raise ModelValidationError(
                    f"|kappa|^2 must be 1, got {norm2:.6g}", field="model.kappa"
                )

    @property
    def variables(self) -> FrozenSet[str]:
        """Names coefficient and payoff expressions may read."""
        return state_variables(self.m, self.d, self.factor is not None)

    def env(
        self,
        t: float,
        s: np.ndarray,
        v: Optional[np.ndarray] = None,
        b: Optional[np.ndarray] = None,
    ) -> Dict[str, Value]:
        """Variable bindings for prices s (..., d), factor v (...) and Brownian b (..., m)."""
        env: Dict[str, Value] = {"t": float(t)}
        s = np.asarray(s, dtype=float)
        for i in range(self.d):
            env[f"s{i + 1}"] = s[..., i]
        env["s"] = env["s1"]
        if self.factor is not None:
            env["v"] = np.asarray(v, dtype=float) if v is not None else self.factor.v0
        if b is not None:
            for j in range(self.m):
                env[f"b{j + 1}"] = np.asarray(b)[..., j]
        return env

    def drift_at(self, env: Env) -> np.ndarray:
        """b(t, state) with shape (..., d)."""
        return np.asarray(self.drift(env), dtype=float)

    def sigma_at(self, env: Env) -> np.ndarray:
        """sigma(t, state) with shape (..., d, m)."""
        return np.asarray(self.volatility(env), dtype=float)

    def factor_drift(self, t: float, v: Value) -> np.ndarray:
        """eta(t, v) broadcast to the shape of v."""
        assert self.factor is not None
        return np.broadcast_to(self.factor.eta(t, v), np.shape(v)).astype(float)


def theta(model: MarketModel, t: Value, state: Env) -> np.ndarray:
    """Market price of risk sigma^T (sigma sigma^T)^{-1} b with shape (..., m)."""
    env = dict(state)
    env["t"] = t
    sigma = model.sigma_at(env)
    b = np.broadcast_to(model.drift_at(env), sigma.shape[:-1])
    gram = np.einsum("...im,...jm->...ij", sigma, sigma)
    cond = np.linalg.cond(gram)
    worst = np.nanmax(np.where(np.isfinite(cond), cond, np.inf))
    if not worst < SINGULAR_CONDITION:
        idx = np.unravel_index(np.argmax(np.where(np.isfinite(cond), cond, np.inf)), np.shape(cond))
        raise SingularVolatilityError(
            "sigma sigma^T is singular", condition=float(worst), where=_where(t, env, idx)
        )
    out = matTVec(sigma, np.linalg.solve(gram, b[..., None])[..., 0])
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("theta is not finite")
    return out


def _where(t: Value, env: Env, idx: Tuple[int, ...]) -> Dict[str, float]:
    found: Dict[str, float] = {}
    for key, value in env.items():
        arr = np.asarray(value)
        found[key] = float(arr[idx]) if arr.ndim and idx else float(arr)
    return found


def build_example(
    theta_fn: Callable[[Value], Value],
    sigma_fn: Callable[[Value], Value],
    eta_fn: Callable[[Value], Value],
    kappa1: float,
    kappa2: float,
    horizon: float,
    s0: float = 1.0,
    v0: float = 0.0,
    label: str = "factor",
    state_box: Optional[Dict[str, Tuple[float, float]]] = None,
) -> MarketModel:
    """One stock with dS/S = b(V)dt + sigma(V)dB1 and a factor dV = eta(V)dt + kappa1 dB1 + kappa2 dB2."""
    norm2 = kappa1**2 + kappa2**2
    if abs(norm2 - 1.0) > KAPPA_TOLERANCE:
        raise ModelValidationError(
            f"kappa1^2 + kappa2^2 must be 1, got {norm2:.6g}", field="model.kappa"
        )

    def volatility(env: Env) -> np.ndarray:
        shape = batch_shape(env)
        sig = np.broadcast_to(sigma_fn(env["v"]), shape)
        return np.stack([sig, np.zeros(shape)], axis=-1)[..., None, :]

    def drift(env: Env) -> np.ndarray:
        shape = batch_shape(env)
        v = env["v"]
        return np.broadcast_to(np.multiply(sigma_fn(v), theta_fn(v)), shape)[..., None]

    box = dict(state_box or {})
    box.setdefault("v", (v0 - 4.0 * math.sqrt(horizon), v0 + 4.0 * math.sqrt(horizon)))
    return MarketModel(
        m=2,
        d=1,
        horizon=float(horizon),
        s0=np.array([float(s0)]),
        drift=drift,
        volatility=volatility,
        factor=FactorBlock(
            eta=lambda t, v: eta_fn(v), kappa=np.array([kappa1, kappa2], dtype=float), v0=v0
        ),
        state_box=box,
        reads=frozenset({"v"}),
        label=label,
        example=(theta_fn, sigma_fn),
    )


def constant_market(
    b: Sequence[float], sigma: Sequence[Sequence[float]], horizon: float, s0: Optional[Sequence[float]] = None
) -> MarketModel:
    """A Black-Scholes market with constant drift and volatility."""
    b_arr = np.atleast_1d(np.asarray(b, dtype=float))
    sig = np.atleast_2d(np.asarray(sigma, dtype=float))
    d, m = sig.shape
    if b_arr.shape != (d,):
        raise ModelValidationError(f"drift needs {d} entries", field="model.drift")

    def drift(env: Env) -> np.ndarray:
        return np.broadcast_to(b_arr, batch_shape(env) + (d,))

    def volatility(env: Env) -> np.ndarray:
        return np.broadcast_to(sig, batch_shape(env) + (d, m))

    return MarketModel(
        m=m,
        d=d,
        horizon=float(horizon),
        s0=np.ones(d) if s0 is None else np.asarray(s0, dtype=float),
        drift=drift,
        volatility=volatility,
        bounds=CoefficientBounds(
            drift=float(np.linalg.norm(b_arr)) + 1e-12,
            volatility=float(np.linalg.norm(sig)) + 1e-12,
        ),
        label="constant",
    )


@dataclasses.dataclass(frozen=True)
class ModelReport:
    """Sampled coefficient statistics."""

    samples: int
    max_drift: float
    max_volatility: float
    max_theta: float
    max_condition: float
    max_residual: float

    def as_dict(self) -> Dict[str, Any]:
        """Convert to a dict."""
        return dataclasses.asdict(self)


def validate_model(model: MarketModel, samples: int = VALIDATION_SAMPLES, seed: int = 0) -> ModelReport:
    """Check rank, finiteness and declared bounds on quasi-random states in the state box."""
    names = [f"s{i + 1}" for i in range(model.d)]
    if model.factor is not None:
        names.append("v")
    lows = [0.0]
    highs = [model.horizon]
    for name in names:
        default = (1e-3, 10.0 * float(np.max(model.s0))) if name.startswith("s") else (-4.0, 4.0)
        lo, hi = model.state_box.get(name, model.state_box.get("s", default) if name.startswith("s") else default)
        lows.append(lo)
        highs.append(hi)
    points = qmc.scale(qmc.Halton(d=len(lows), seed=seed).random(samples), lows, highs)
    worst = ModelReport(samples, 0.0, 0.0, 0.0, 0.0, 0.0)
    for chunk in np.array_split(np.arange(samples), 20):
        pts = points[chunk]
        t = pts[:, 0]
        s = pts[:, 1 : 1 + model.d]
        v = pts[:, 1 + model.d] if model.factor is not None else None
        env = model.env(0.0, s, v)
        env["t"] = t
        b = model.drift_at(env)
        sigma = model.sigma_at(env)
        if not (np.all(np.isfinite(b)) and np.all(np.isfinite(sigma))):
            bad = int(np.argmin(np.all(np.isfinite(b), axis=-1)))
            raise NonFiniteError(
                "coefficient evaluation is not finite", where=tuple(float(x) for x in pts[bad])
            )
        th = theta(model, t, env)
        gram = np.einsum("...im,...jm->...ij", sigma, sigma)
        residual = vecLen(matVec(sigma, th) - b) / (1.0 + vecLen(b))
        worst = ModelReport(
            samples,
            max(worst.max_drift, float(np.max(vecLen(b)))),
            max(worst.max_volatility, float(np.max(np.linalg.norm(sigma, axis=(-2, -1))))),
            max(worst.max_theta, float(np.max(vecLen(th)))),
            max(worst.max_condition, float(np.max(np.linalg.cond(gram)))),
            max(worst.max_residual, float(np.max(residual))),
        )
    for name, value, bound in (
        ("drift", worst.max_drift, model.bounds.drift),
        ("volatility", worst.max_volatility, model.bounds.volatility),
        ("theta", worst.max_theta, model.bounds.theta),
    ):
        if value > bound:
            raise ModelValidationError(
                f"sampled |{name}| = {value:.6g} exceeds the declared bound {bound:.6g}",
                field=f"model.bounds.{name}",
            )
    _LOGGER.debug("Model %s validated on %d states: %s", model.label, samples, worst)
    return worst


class PayoffKind(Enum):
    """How a payoff reads a path."""

    TERMINAL = "terminal"
    PATH = "path"


@dataclasses.dataclass(frozen=True, eq=False)
class Payoff:
    """A random endowment F paid at the horizon."""

    label: str
    kind: PayoffKind
    func: Callable[[Any], np.ndarray]
    reads: FrozenSet[str] = frozenset()
    bounds: Optional[Tuple[float, float]] = None
    terminal: Optional[Callable[[Env], Value]] = None

    @staticmethod
    def constant(c: float) -> "Payoff":
        """F = c."""
        value = float(c)
        return Payoff(
            label=f"{value:g}",
            kind=PayoffKind.TERMINAL,
            func=lambda ens: np.full(ens.n_paths, value),
            bounds=(value, value),
            terminal=lambda env: np.broadcast_to(value, batch_shape(env)),
        )

    @staticmethod
    def from_terminal(
        fn: Callable[[Env], Value],
        label: str,
        reads: FrozenSet[str],
        bounds: Optional[Tuple[float, float]] = None,
    ) -> "Payoff":
        """A function of the terminal state."""

        def func(ens: Any) -> np.ndarray:
            env = ens.env_at(ens.grid.steps)
            return np.broadcast_to(fn(env), (ens.n_paths,)).astype(float)

        return Payoff(label, PayoffKind.TERMINAL, func, frozenset(reads) - {"t"}, bounds, fn)

    @staticmethod
    def from_expression(
        source: str,
        model: MarketModel,
        bounds: Optional[Tuple[float, float]] = None,
        aggregate: Optional[str] = None,
    ) -> "Payoff":
        """Parse a payoff expression; with aggregate in {mean, max, min} it is a path functional."""
        expr = Expression(source, field="payoff")
        expr.check_variables(model.variables)
        if aggregate is None:
            return Payoff.from_terminal(expr.evaluate, source, expr.variables, bounds)
        reducers = {"mean": np.mean, "max": np.max, "min": np.min}
        if aggregate not in reducers:
            raise ModelValidationError(
                f"unknown aggregate {aggregate!r}, expected one of {sorted(reducers)}",
                field="payoff.aggregate",
            )
        reduce = reducers[aggregate]

        def func(ens: Any) -> np.ndarray:
            values = [
                np.broadcast_to(expr.evaluate(ens.env_at(i)), (ens.n_paths,))
                for i in range(1, ens.grid.steps + 1)
            ]
            return reduce(np.stack(values, axis=1), axis=1)

        return Payoff(
            f"{aggregate}({source})", PayoffKind.PATH, func, expr.variables - {"t"}, bounds
        )

    def evaluate(self, ensemble: Any) -> np.ndarray:
        """F on every path of the ensemble, shape (N,)."""
        values = np.asarray(self.func(ensemble), dtype=float)
        if not np.all(np.isfinite(values)):
            bad = int(np.argmin(np.isfinite(values)))
            raise NonFiniteError(f"payoff {self.label} is not finite", where=("path", bad))
        return self.check_bounds(values)

    def at_state(self, env: Env) -> np.ndarray:
        """F as a function of a terminal state; only for terminal payoffs."""
        if self.terminal is None:
            raise ModelValidationError(
                f"payoff {self.label} is a path functional", field="payoff"
            )
        return self.check_bounds(np.asarray(self.terminal(env), dtype=float))

    def check_bounds(self, values: np.ndarray) -> np.ndarray:
        """Raise if a value leaves the declared bounds; returns values unchanged."""
        if self.bounds is None or values.size == 0:
            return values
        lo, hi = self.bounds
        slack = BOUNDS_TOLERANCE * (1.0 + max(abs(lo), abs(hi)))
        finite = values[np.isfinite(values)]
        if finite.size and (finite.min() < lo - slack or finite.max() > hi + slack):
            raise ModelValidationError(
                f"payoff {self.label} takes values in [{finite.min():.6g}, {finite.max():.6g}] "
                f"outside the declared bounds [{lo:g}, {hi:g}]",
                field="payoff.bounds",
            )
        return values

    def map(self, fn: Callable[[np.ndarray], np.ndarray], label: str,
            bounds: Optional[Tuple[float, float]] = None) -> "Payoff":
        """Apply a pointwise transform to the payoff values."""
        terminal = self.terminal
        return Payoff(
            label=label,
            kind=self.kind,
            func=lambda ens: fn(self.func(ens)),
            reads=self.reads,
            bounds=bounds,
            terminal=None if terminal is None else (lambda env: fn(np.asarray(terminal(env)))),
        )

    def scaled(self, c: float) -> "Payoff":
        """c F."""
        bounds = None
        if self.bounds is not None:
            lo, hi = c * self.bounds[0], c * self.bounds[1]
            bounds = (min(lo, hi), max(lo, hi))
        return self.map(lambda x: c * x, f"{c:g}*({self.label})", bounds)

    def shifted(self, c: float) -> "Payoff":
        """F + c."""
        bounds = None if self.bounds is None else (self.bounds[0] + c, self.bounds[1] + c)
        return self.map(lambda x: x + c, f"({self.label})+{c:g}", bounds)

    def negated(self) -> "Payoff":
        """-F."""
        return self.scaled(-1.0)


def truncate_payoff(payoff: Payoff, n: float, k: float) -> Payoff:
    """F^{n,k} = min(F+, n) - min(F-, k)."""
    if n <= 0 or k <= 0:
        raise ModelValidationError("truncation levels must be positive", field="truncation")
    return payoff.map(lambda x: np.clip(x, -k, n), f"trunc({payoff.label},{n:g},{k:g})", (-k, n))


@dataclasses.dataclass(frozen=True)
class RiskParams:
    """Risk aversion and the integrability exponents."""

    alpha: float
    p: int = 2
    epsilon: float = 1.0
    k: Optional[float] = None

    def __post_init__(self) -> None:
        """Validate the ranges."""
        if not self.alpha > 0:
            raise ModelValidationError("must be positive", field="risk.alpha")
        if int(self.p) != self.p or self.p <= 1:
            raise ModelValidationError("must be an integer > 1", field="risk.p")
        if not self.epsilon > 0:
            raise ModelValidationError("must be positive", field="risk.epsilon")
        if self.k is not None and self.k < 0:
            raise ModelValidationError("must be nonnegative", field="risk.k")

    def with_alpha(self, alpha: float) -> "RiskParams":
        """Copy with another risk aversion."""
        return dataclasses.replace(self, alpha=alpha)


class AdmissibleSet(Enum):
    """Labels of the admissible strategy sets."""

    EXPONENTIAL = "A_D'"
    BOUNDED_BELOW = "A"
    CONE = "A_Cc"


@dataclasses.dataclass(frozen=True)
class AssumptionReport:
    """Sampled integrability diagnostics."""

    upper_moment: Estimate
    lower_moment: Estimate
    diverging: bool
    verdict: Verdict
    lower_bound: Optional[float] = None

    def as_dict(self) -> Dict[str, Any]:
        """Convert to a dict."""
        return {
            "upper_moment": self.upper_moment.as_dict(),
            "lower_moment": self.lower_moment.as_dict(),
            "diverging": self.diverging,
            "verdict": self.verdict.value,
            "lower_bound": self.lower_bound,
        }


def sampled_moment(values: np.ndarray) -> Tuple[Estimate, bool]:
    """Estimate E[values] and flag heavy tails.

    The flag is raised when the estimate on N/4, N/2, N paths keeps growing
    by more than its noise, or when a single sample carries most of the mass.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        if not np.all(np.isfinite(values)):
            return Estimate(math.inf, math.inf), True
        est = Estimate.from_samples(values)
        n = values.size
        partial = [float(np.mean(values[: max(2, n // 4)])), float(np.mean(values[: max(2, n // 2)])), est.value]
        growing = all(b > a + 2.0 * est.se for a, b in zip(partial, partial[1:]))
        share = float(np.max(values) / np.sum(values)) if np.sum(values) > 0 else 0.0
    return est, growing or (n >= 100 and share > 0.2)


def check_assumption1(model: MarketModel, payoff: Payoff, params: RiskParams, ensemble: Any) -> AssumptionReport:
    """Sample E[exp(p alpha F+)] and E[exp(epsilon F-)]."""
    values = payoff.evaluate(ensemble)
    with np.errstate(over="ignore"):
        upper, up_div = sampled_moment(np.exp(params.p * params.alpha * np.maximum(values, 0.0)))
        lower, low_div = sampled_moment(np.exp(params.epsilon * np.maximum(-values, 0.0)))
    diverging = up_div or low_div
    if not (math.isfinite(upper.value) and math.isfinite(lower.value)):
        verdict = Verdict.FAIL
    elif diverging:
        verdict = Verdict.WARN
    else:
        verdict = Verdict.PASS
    if verdict is not Verdict.PASS:
        _LOGGER.warning(
            "Integrability check for %s on %s: %s (upper %s, lower %s)",
            payoff.label, model.label, verdict.value, upper, lower,
        )
    return AssumptionReport(upper, lower, diverging, verdict)


def check_assumption2(model: MarketModel, payoff: Payoff, params: RiskParams, ensemble: Any) -> AssumptionReport:
    """Integrability of exp(p alpha F+) together with F- <= k on the sample."""
    first = check_assumption1(model, payoff, params, ensemble)
    worst_loss = float(np.max(np.maximum(-payoff.evaluate(ensemble), 0.0)))
    k = params.k if params.k is not None else (
        max(-payoff.bounds[0], 0.0) if payoff.bounds is not None else None
    )
    verdict = first.verdict
    if k is None or worst_loss > k:
        verdict = Verdict.FAIL if verdict is Verdict.FAIL else Verdict.WARN
        _LOGGER.warning(
            "Payoff %s is not bounded below by a declared constant (sampled F- up to %.6g)",
            payoff.label, worst_loss,
        )
    return dataclasses.replace(first, verdict=verdict, lower_bound=k)


def admissible_label(assumption2: Optional[AssumptionReport], is_cone: bool) -> AdmissibleSet:
    """Pick the admissible set label of a run."""
    if is_cone and assumption2 is not None and assumption2.verdict is Verdict.PASS:
        return AdmissibleSet.CONE
    if assumption2 is not None and assumption2.verdict is Verdict.PASS:
        return AdmissibleSet.BOUNDED_BELOW
    return AdmissibleSet.EXPONENTIAL
