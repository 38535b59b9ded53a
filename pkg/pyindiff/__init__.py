from pyindiff._version import __version__
from pyindiff.geometry import ConstraintSet, ImageSet
from pyindiff.model import MarketModel, Payoff, RiskParams, build_example, constant_market
from pyindiff.paths import PathEnsemble, TimeGrid, simulate
from pyindiff.pricing import buying_price, hedge, indifference_price, run_price
from pyindiff.regression import RegressionBasis

__all__ = [
    "__version__",
    "build_example",
    "buying_price",
    "constant_market",
    "ConstraintSet",
    "hedge",
    "ImageSet",
    "indifference_price",
    "MarketModel",
    "PathEnsemble",
    "Payoff",
    "RegressionBasis",
    "RiskParams",
    "run_price",
    "simulate",
    "TimeGrid",
]
