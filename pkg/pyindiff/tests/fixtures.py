"""Small markets and payoffs shared by the tests."""
from typing import Any, Dict, Optional, Tuple

from pyindiff.model import MarketModel, Payoff, build_example, constant_market
from pyindiff.paths import PathEnsemble, TimeGrid, simulate


def brownian_market(b: float = 0.0, sigma: float = 1.0, horizon: float = 1.0) -> MarketModel:
    """One stock driven by one Brownian motion with constant coefficients."""
    return constant_market([b], [[sigma]], horizon)


def incomplete_market(b: float = 0.5, horizon: float = 1.0) -> MarketModel:
    """One stock, two Brownian motions, the second one not traded."""
    return constant_market([b], [[1.0, 0.0]], horizon)


def factor_market(
    kappa: Tuple[float, float] = (0.6, 0.8),
    risk_premium: float = 0.3,
    sigma: float = 0.2,
    eta: float = 0.0,
    horizon: float = 1.0,
) -> MarketModel:
    """The one factor example with constant theta, sigma and eta."""
    return build_example(
        lambda v: risk_premium,
        lambda v: sigma,
        lambda v: eta,
        kappa[0],
        kappa[1],
        horizon,
    )


def expression_payoff(source: str, model: MarketModel,
                      bounds: Optional[Tuple[float, float]] = None) -> Payoff:
    """A terminal payoff from an expression."""
    return Payoff.from_expression(source, model, bounds)


def paths(model: MarketModel, n_paths: int = 20_000, steps: int = 20, seed: int = 7) -> PathEnsemble:
    """A seeded ensemble on a uniform grid."""
    return simulate(model, TimeGrid(model.horizon, steps), n_paths, seed, threads=1)


def factor_config(**sections: Any) -> Dict[str, Any]:
    """A small raw config for the one factor example; keyword sections replace the defaults."""
    config: Dict[str, Any] = {
        "model": {"example": {"theta": "0.3", "sigma": "0.2", "eta": "0", "kappa": [0.6, 0.8], "horizon": 1.0}},
        "constraint": {"kind": "full"},
        "payoff": "v",
        "risk": {"alpha": 1.0},
        "solver": {"seed": 7, "paths": 2000, "steps": 10},
    }
    config.update(sections)
    return config
