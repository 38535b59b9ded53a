"""Regression bases for the conditional expectations of the backward induction."""
import dataclasses
import logging
from enum import Enum
from typing import Any, Dict, Optional

import numpy as np
from sklearn.linear_model import LinearRegression, Ridge
from sklearn.pipeline import Pipeline, make_pipeline
from sklearn.preprocessing import PolynomialFeatures, SplineTransformer, StandardScaler

from .exceptions import ModelValidationError

_LOGGER = logging.getLogger(__name__)

MAX_CONDITION = 1.0e10
MIN_SPREAD = 1.0e-12


class BasisFamily(Enum):
    """Families of regression functions."""

    POLY = "poly"
    SPLINE = "spline"


@dataclasses.dataclass(frozen=True)
class RegressionBasis:
    """Polynomials up to a degree (or cubic splines for one feature) with a ridge penalty."""

    family: BasisFamily = BasisFamily.POLY
    degree: int = 2
    ridge: float = 1.0e-8
    knots: int = 8
    max_condition: float = MAX_CONDITION

    def __post_init__(self) -> None:
        """Validate the parameters."""
        if self.degree < 1:
            raise ModelValidationError("must be at least 1", field="solver.degree")
        if self.ridge < 0:
            raise ModelValidationError("must be nonnegative", field="solver.ridge")
        if self.knots < 2:
            raise ModelValidationError("need at least 2 knots", field="solver.knots")

    def as_dict(self) -> Dict[str, Any]:
        """Convert to a dict."""
        return {
            "family": self.family.value,
            "degree": self.degree,
            "ridge": self.ridge,
            "knots": self.knots,
            "max_condition": self.max_condition,
        }


class StepRegression:
    """Least squares projection onto the basis evaluated at one time step.

    The design matrix is built once; fit_predict can then be called for any
    number of targets. Features with no spread (all paths at the same state,
    as at t = 0) are dropped; with none left the projection is the sample mean.
    """

    def __init__(self, basis: RegressionBasis, features: np.ndarray) -> None:
        """Build the design matrix, lowering the degree while it is ill conditioned."""
        self.basis = basis
        features = np.asarray(features, dtype=float)
        if features.ndim == 1:
            features = features[:, None]
        n = features.shape[0]
        spread = np.std(features, axis=0) if features.size else np.zeros(0)
        self.columns = np.flatnonzero(spread > MIN_SPREAD)
        self.degree = 0
        self.condition = 1.0
        self.downgraded = False
        self._design: Optional[np.ndarray] = None
        if self.columns.size == 0:
            return
        x = features[:, self.columns]
        use_spline = basis.family is BasisFamily.SPLINE and x.shape[1] == 1
        if basis.family is BasisFamily.SPLINE and not use_spline:
            _LOGGER.warning(
                "Spline basis needs one feature, got %d; using polynomials", x.shape[1]
            )
        for degree in range(basis.degree, 0, -1):
            transform = self._transform(use_spline, degree, n)
            design = transform.fit_transform(x)
            sv = np.linalg.svd(np.column_stack([np.ones(n), design]), compute_uv=False)
            condition = float(sv[0] / max(sv[-1], 1e-300))
            self.degree, self.condition, self._design = degree, condition, design
            if condition <= basis.max_condition:
                break
            self.downgraded = True
            _LOGGER.warning(
                "Regression design ill conditioned (cond=%.3e) at degree %d, lowering the degree",
                condition, degree,
            )
        _LOGGER.debug(
            "Regression basis: %d features, degree %d, %d columns, cond %.3e",
            x.shape[1], self.degree, self.size, self.condition,
        )

    def _transform(self, use_spline: bool, degree: int, n: int) -> Pipeline:
        if use_spline:
            knots = max(2, min(self.basis.knots + degree - self.basis.degree, n // 10))
            return make_pipeline(
                StandardScaler(),
                SplineTransformer(
                    n_knots=knots, degree=3, knots="quantile", extrapolation="linear", include_bias=False
                ),
            )
        return make_pipeline(StandardScaler(), PolynomialFeatures(degree=degree, include_bias=False))

    @property
    def size(self) -> int:
        """Number of basis functions, the unpenalized intercept included."""
        return 1 if self._design is None else int(self._design.shape[1]) + 1

    def fit_predict(self, targets: np.ndarray) -> np.ndarray:
        """Fitted conditional expectations of the targets, same shape as the targets."""
        y = np.asarray(targets, dtype=float)
        if self._design is None:
            return np.broadcast_to(np.mean(y, axis=0), y.shape).copy()
        n = y.shape[0]
        if self.basis.ridge > 0:
            model = Ridge(alpha=self.basis.ridge * n, fit_intercept=True, solver="cholesky")
        else:
            model = LinearRegression()
        model.fit(self._design, y)
        return np.asarray(model.predict(self._design)).reshape(y.shape)
