"""Closed form reference prices for degenerate markets.

All oracles reduce to a one dimensional Gaussian expectation: the payoff
must read a single terminal variable (a Brownian coordinate, the factor or
the price of a single stock) whose law is normal or log-normal under the
relevant measure. Smooth payoffs use Gauss-Hermite quadrature; payoffs with
two values use the exact probability of the upper value.
"""
import dataclasses
import logging
import math
from typing import Any, Callable, Dict, Optional, Tuple

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy import optimize, stats

from .exceptions import OracleUnavailableError
from .geometry import ConstraintSet, SetKind
from .model import MarketModel, Payoff, theta

_LOGGER = logging.getLogger(__name__)

QUADRATURE_NODES = 96
CONSTANT_TOLERANCE = 1e-12
SCAN_POINTS = 4001
SCAN_SDS = 10.0

PHYSICAL = "physical"
MINIMAL_MARTINGALE = "minimal-martingale"


@dataclasses.dataclass(frozen=True)
class GaussianVariable:
    """The variable a payoff reads at the horizon: transform(mean + sd * xi), xi standard normal."""

    name: str
    mean: float
    sd: float
    lognormal: bool = False

    def values(self, xi: np.ndarray) -> np.ndarray:
        """The variable at standard normal points."""
        x = self.mean + self.sd * np.asarray(xi, dtype=float)
        return np.exp(x) if self.lognormal else x


@dataclasses.dataclass(frozen=True)
class OracleResult:
    """A reference price with the route that produced it."""

    value: float
    method: str
    measure: str
    variable: Optional[GaussianVariable]
    upper_probability: Optional[float] = None

    def as_dict(self) -> Dict[str, Any]:
        """Convert to a dict."""
        return {
            "value": self.value,
            "method": self.method,
            "measure": self.measure,
            "variable": None if self.variable is None else dataclasses.asdict(self.variable),
            "upper_probability": self.upper_probability,
        }


def digital_certainty_equivalent(alpha: float, probability: float = 0.5, low: float = 0.0,
                                 high: float = 1.0) -> float:
    """(1/alpha) ln E[exp(alpha F)] for F in {low, high} with P(F = high) = probability."""
    jump = alpha * (high - low)
    # log(1 - p + p e^jump) without overflow for large jumps
    if jump > 0:
        return low + (jump + math.log(probability + (1.0 - probability) * math.exp(-jump))) / alpha
    return low + math.log(1.0 - probability + probability * math.exp(jump)) / alpha


def _sample_states(model: MarketModel) -> Dict[str, Any]:
    t = np.array([0.0, 0.5, 1.0]) * model.horizon
    scale = np.array([0.5, 1.0, 2.0])
    if model.factor is not None:
        lo, hi = model.state_box.get("v", (model.factor.v0 - 3.0, model.factor.v0 + 3.0))
        v = np.linspace(lo, hi, 3)
    else:
        v = np.zeros(3)
    tt, ss, vv = (a.ravel() for a in np.meshgrid(t, scale, v, indexing="ij"))
    env = model.env(0.0, ss[:, None] * model.s0, vv if model.factor is not None else None,
                    np.zeros(tt.shape + (model.m,)))
    env["t"] = tt
    return env


def _constant(values: np.ndarray, what: str) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    first = values.reshape((-1,) + values.shape[-1:])[0] if values.ndim else values
    if not np.allclose(values, first, rtol=0.0, atol=CONSTANT_TOLERANCE * (1.0 + np.max(np.abs(values)))):
        raise OracleUnavailableError(f"no closed form: {what} is not constant")
    return np.asarray(first)


def constant_coefficients(model: MarketModel) -> Tuple[np.ndarray, np.ndarray, np.ndarray, Optional[float]]:
    """(b, sigma, theta, eta) if none of them depends on (t, state)."""
    env = _sample_states(model)
    shape = np.shape(env["t"])
    b = _constant(np.broadcast_to(model.drift_at(env), shape + (model.d,)), "the drift")
    sigma_all = np.broadcast_to(model.sigma_at(env), shape + (model.d, model.m))
    sigma = _constant(sigma_all.reshape(shape + (-1,)), "the volatility").reshape(model.d, model.m)
    th = _constant(np.broadcast_to(theta(model, env["t"], env), shape + (model.m,)), "the risk premium")
    eta = None
    if model.factor is not None:
        eta = float(_constant(np.array([model.factor_drift(float(t), v) for t, v in zip(env["t"], env["v"])])[:, None],
                              "the factor drift")[0])
    return b, sigma, th, eta


def terminal_variable(model: MarketModel, payoff: Payoff, measure: str) -> GaussianVariable:
    """Law of the single variable the payoff reads, under P or under the minimal martingale measure."""
    if payoff.terminal is None:
        raise OracleUnavailableError(f"no closed form for the path functional {payoff.label}")
    reads = set(payoff.reads) - {"t"}
    if len(reads) != 1:
        raise OracleUnavailableError(
            f"closed forms need a payoff of one terminal variable, {payoff.label} reads {sorted(reads)}"
        )
    name = reads.pop()
    b, sigma, th, eta = constant_coefficients(model)
    horizon = model.horizon
    shift = measure == MINIMAL_MARTINGALE
    if name.startswith("b"):
        j = int(name[1:]) - 1
        mean = -th[j] * horizon if shift else 0.0
        return GaussianVariable(name, float(mean), math.sqrt(horizon))
    if name == "v":
        assert model.factor is not None and eta is not None
        drift = eta - (float(model.factor.kappa @ th) if shift else 0.0)
        return GaussianVariable(name, model.factor.v0 + drift * horizon, math.sqrt(horizon))
    i = 0 if name == "s" else int(name[1:]) - 1
    vol2 = float(sigma[i] @ sigma[i])
    drift = 0.0 if shift else float(b[i])
    mean = math.log(float(model.s0[i])) + (drift - 0.5 * vol2) * horizon
    return GaussianVariable(name, mean, math.sqrt(vol2 * horizon), lognormal=True)


def _payoff_fn(model: MarketModel, payoff: Payoff, var: GaussianVariable) -> Callable[[np.ndarray], np.ndarray]:
    assert payoff.terminal is not None

    def evaluate(xi: np.ndarray) -> np.ndarray:
        x = var.values(xi)
        s = np.broadcast_to(model.s0, x.shape + (model.d,)).copy()
        v = np.full(x.shape, model.factor.v0) if model.factor is not None else None
        b = np.zeros(x.shape + (model.m,))
        if var.name == "v":
            v = x
        elif var.name.startswith("b"):
            b[..., int(var.name[1:]) - 1] = x
        else:
            s[..., 0 if var.name == "s" else int(var.name[1:]) - 1] = x
        env = model.env(model.horizon, s, v, b)
        return np.broadcast_to(np.asarray(payoff.at_state(env), dtype=float), x.shape)

    return evaluate


def _two_values(fn: Callable[[np.ndarray], np.ndarray]) -> Optional[Tuple[float, float, float]]:
    """(low, high, P(F = high)) when F takes two values, located by bisection on the jumps."""
    xi = np.linspace(-SCAN_SDS, SCAN_SDS, SCAN_POINTS)
    values = fn(xi)
    levels = np.unique(values)
    if levels.size != 2:
        return None
    low, high = float(levels[0]), float(levels[1])
    upper = values == high
    mid = 0.5 * (low + high)
    edges = [-math.inf]
    for k in np.flatnonzero(upper[1:] != upper[:-1]):
        edges.append(optimize.brentq(lambda x: float(fn(np.array([x]))[0]) - mid, xi[k], xi[k + 1], xtol=1e-14))
    edges.append(math.inf)
    probability = 0.0
    inside = bool(upper[0])
    for a, b in zip(edges, edges[1:]):
        if inside:
            probability += float(stats.norm.cdf(b) - stats.norm.cdf(a))
        inside = not inside
    return low, high, probability


def gaussian_expectation(fn: Callable[[np.ndarray], np.ndarray], nodes: int = QUADRATURE_NODES) -> float:
    """E[fn(xi)] for xi standard normal by Gauss-Hermite quadrature."""
    x, w = hermegauss(nodes)
    return float(np.sum(w * fn(x)) / math.sqrt(2.0 * math.pi))


def certainty_equivalent(model: MarketModel, payoff: Payoff, alpha: float) -> OracleResult:
    """(1/alpha) ln E[exp(alpha F)], the price when no trading is allowed."""
    var = terminal_variable(model, payoff, PHYSICAL)
    fn = _payoff_fn(model, payoff, var)
    digital = _two_values(fn)
    if digital is not None:
        low, high, p = digital
        return OracleResult(digital_certainty_equivalent(alpha, p, low, high), "digital", PHYSICAL, var, p)
    x, w = hermegauss(QUADRATURE_NODES)
    exponent = alpha * fn(x)
    top = float(np.max(exponent))
    moment = float(np.sum(w * np.exp(exponent - top)) / math.sqrt(2.0 * math.pi))
    return OracleResult((math.log(moment) + top) / alpha, "gauss-hermite", PHYSICAL, var)


def complete_market_price(model: MarketModel, payoff: Payoff) -> OracleResult:
    """E^{Q^theta}[F], the replication price."""
    var = terminal_variable(model, payoff, MINIMAL_MARTINGALE)
    fn = _payoff_fn(model, payoff, var)
    digital = _two_values(fn)
    if digital is not None:
        low, high, p = digital
        return OracleResult(low + p * (high - low), "digital", MINIMAL_MARTINGALE, var, p)
    return OracleResult(gaussian_expectation(fn), "gauss-hermite", MINIMAL_MARTINGALE, var)


def _trades_everything(constraint: ConstraintSet) -> bool:
    return constraint.kind is SetKind.FULL


def oracle_price(model: MarketModel, constraint: ConstraintSet, payoff: Payoff, alpha: float) -> OracleResult:
    """Reference indifference price for the degenerate cases that have one, else OracleUnavailableError."""
    if not payoff.reads and payoff.terminal is not None:
        value = _constant(np.ravel(payoff.at_state(_sample_states(model)))[:, None], f"payoff {payoff.label}")
        return OracleResult(float(value[0]), "constant", PHYSICAL, None)
    if constraint.kind is SetKind.ZERO:
        result = certainty_equivalent(model, payoff, alpha)
    elif model.factor is not None and model.d == 1 and _trades_everything(constraint) and set(payoff.reads) <= {"v"}:
        kappa = model.factor.kappa
        if abs(kappa[1]) <= CONSTANT_TOLERANCE:
            result = complete_market_price(model, payoff)
        elif abs(kappa[0]) <= CONSTANT_TOLERANCE:
            # the factor is independent of the traded risk
            result = certainty_equivalent(model, payoff, alpha)
        else:
            raise OracleUnavailableError("no closed form for a factor correlated with the stock")
    elif _trades_everything(constraint) and model.d == model.m:
        result = complete_market_price(model, payoff)
    else:
        raise OracleUnavailableError(
            f"no closed form for a {constraint.kind.value} constraint with d={model.d}, m={model.m}"
        )
    _LOGGER.info("Oracle price of %s at alpha=%g: %.10f (%s)", payoff.label, alpha, result.value, result.method)
    return result
