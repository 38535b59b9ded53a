"""BSDE generators: the primal driver, the price generator and the dual driver.

All functions take a DriverContext holding alpha, theta and the image set
sigma^T C, and accept one vector z in R^m or a batch (..., m) matching the
batch of the context.
"""
import dataclasses
import logging
import math
from typing import Tuple, Union

import numpy as np
from scipy import optimize

from .exceptions import ConvergenceError, ModelValidationError
from .geometry import ConstraintSet, ImageSet, image_dist2, image_support, project_image
from .vec import ArrayLike, asVector, vecDot, vecLen, vecLenSq

_LOGGER = logging.getLogger(__name__)

# the numeric conjugate is searched in the box |z_i| <= this radius
CONJUGATE_RADIUS = 1.0e6
KINK_TOLERANCE = 1.0e-8


@dataclasses.dataclass(frozen=True, eq=False)
class DriverContext:
    """alpha, theta (..., m) and sigma^T C at one time or a batch of (t, state)."""

    alpha: float
    theta: np.ndarray
    image: ImageSet

    def __post_init__(self) -> None:
        """Check alpha and the dimensions."""
        if not self.alpha > 0:
            raise ModelValidationError("must be positive", field="risk.alpha")
        if np.shape(self.theta)[-1] != self.image.m:
            raise ModelValidationError(
                f"theta has dimension {np.shape(self.theta)[-1]}, the image lives in R^{self.image.m}"
            )

    @staticmethod
    def constant(
        constraint: ConstraintSet, sigma: ArrayLike, theta: ArrayLike, alpha: float
    ) -> "DriverContext":
        """Context for constant coefficients."""
        sig = np.atleast_2d(np.asarray(sigma, dtype=float))
        return DriverContext(alpha, np.atleast_1d(np.asarray(theta, dtype=float)), ImageSet(constraint, sig))

    @staticmethod
    def at_step(ensemble: object, constraint: ConstraintSet, alpha: float, step: int) -> "DriverContext":
        """Context on every path of an ensemble at the left node of a step."""
        return DriverContext(
            alpha,
            ensemble.theta[:, step],  # type: ignore[attr-defined]
            ImageSet(constraint, ensemble.sigma[:, step]),  # type: ignore[attr-defined]
        )

    @property
    def m(self) -> int:
        """Dimension of z."""
        return self.image.m

    @property
    def is_cone(self) -> bool:
        """Return True for cone constraints."""
        return self.image.base.is_cone

    @property
    def is_subspace(self) -> bool:
        """Return True for subspace constraints."""
        return self.image.base.is_subspace

    def with_alpha(self, alpha: float) -> "DriverContext":
        """Same market, another risk aversion."""
        return dataclasses.replace(self, alpha=alpha)

    def generator_bound(self, z_ref: ArrayLike) -> np.ndarray:
        """Bound |Z^1(0)| + |theta| on the vector m_t of the price generator bounds."""
        return vecLen(asVector(z_ref, self.m)) + vecLen(self.theta)


def _require_cone(ctx: DriverContext, what: str) -> None:
    if not ctx.is_cone:
        raise ModelValidationError(
            f"{what} needs a cone constraint, got {ctx.image.base.kind.value}", field="constraint"
        )


def primal_driver(ctx: DriverContext, z: ArrayLike) -> np.ndarray:
    """f(z) = alpha/2 dist^2(z + theta/alpha) - z^T theta - |theta|^2/(2 alpha)."""
    z = asVector(z, ctx.m)
    a = ctx.alpha
    w = z + ctx.theta / a
    return 0.5 * a * image_dist2(ctx.image, w) - vecDot(z, ctx.theta) - vecLenSq(ctx.theta) / (2 * a)


def driver_bounds(ctx: DriverContext, z: ArrayLike) -> Tuple[np.ndarray, np.ndarray]:
    """-z^T theta - |theta|^2/(2 alpha) <= f(z) <= alpha/2 |z|^2."""
    z = asVector(z, ctx.m)
    lower = -vecDot(z, ctx.theta) - vecLenSq(ctx.theta) / (2 * ctx.alpha)
    upper = 0.5 * ctx.alpha * vecLenSq(z)
    return lower, upper


def price_generator(ctx: DriverContext, h: ArrayLike, z_ref: ArrayLike) -> np.ndarray:
    """g(h) = [dist^2(alpha h + z_ref + theta) - dist^2(z_ref + theta)] / (2 alpha)."""
    _require_cone(ctx, "The price generator")
    h = asVector(h, ctx.m)
    x = asVector(z_ref, ctx.m) + ctx.theta
    a = ctx.alpha
    return (image_dist2(ctx.image, a * h + x) - image_dist2(ctx.image, x)) / (2 * a)


def price_generator_lower(ctx: DriverContext, h: ArrayLike, z_ref: ArrayLike) -> np.ndarray:
    """The alpha -> 0 limit h^T (x - Proj(x)) with x = z_ref + theta."""
    x = asVector(z_ref, ctx.m) + ctx.theta
    point, _ = project_image(ctx.image, x)
    return vecDot(asVector(h, ctx.m), x - point)


def dual_driver(ctx: DriverContext, q: ArrayLike) -> np.ndarray:
    """f*(q) = |q|^2/(2 alpha) + support of sigma^T C at q + theta; +inf off the finite region."""
    q = asVector(q, ctx.m)
    return vecLenSq(q) / (2 * ctx.alpha) + image_support(ctx.image, q + ctx.theta)


def optimal_density(
    ctx: DriverContext, z: ArrayLike, return_proximity: bool = False
) -> Union[np.ndarray, Tuple[np.ndarray, np.ndarray]]:
    """Gradient of the driver, q* = alpha (w - Proj(w)) - theta with w = z + theta/alpha.

    With return_proximity the second value flags points whose w lies within
    KINK_TOLERANCE of the image set without being on it.
    """
    z = asVector(z, ctx.m)
    w = z + ctx.theta / ctx.alpha
    point, _ = project_image(ctx.image, w)
    q = ctx.alpha * (w - point) - ctx.theta
    if not return_proximity:
        return q
    gap = vecLen(w - point)
    return q, (gap > 0) & (gap < KINK_TOLERANCE * (1.0 + vecLen(w)))


def fenchel_residual(ctx: DriverContext, z: ArrayLike) -> np.ndarray:
    """f(z) - z^T q* + f*(q*) at q* = optimal_density(z); zero up to rounding."""
    z = asVector(z, ctx.m)
    q = optimal_density(ctx, z)
    assert isinstance(q, np.ndarray)
    return primal_driver(ctx, z) - vecDot(z, q) + dual_driver(ctx, q)


def dual_driver_numeric(ctx: DriverContext, q: ArrayLike) -> float:
    """sup_z (z^T q - f(z)) by L-BFGS-B for a single point; +inf when the sup sits on the search box."""
    q = asVector(q, ctx.m)
    if q.ndim != 1 or np.ndim(ctx.theta) != 1:
        raise ModelValidationError("The numeric conjugate works on a single point")

    def objective(z: np.ndarray) -> Tuple[float, np.ndarray]:
        grad = optimal_density(ctx, z)
        assert isinstance(grad, np.ndarray)
        return float(primal_driver(ctx, z) - z @ q), grad - q

    bound = [(-CONJUGATE_RADIUS, CONJUGATE_RADIUS)] * ctx.m
    res = optimize.minimize(
        objective,
        q / ctx.alpha,
        jac=True,
        method="L-BFGS-B",
        bounds=bound,
        options={"maxiter": 10_000, "gtol": 1e-12, "ftol": 1e-16},
    )
    if np.any(np.abs(res.x) >= CONJUGATE_RADIUS * (1 - 1e-9)):
        return math.inf
    grad_norm = float(np.linalg.norm(res.jac))
    if not res.success and grad_norm > 1e-6 * (1.0 + float(np.linalg.norm(q))):
        raise ConvergenceError(
            f"Conjugate maximization failed: {res.message}", iterations=int(res.nit), residual=grad_norm
        )
    _LOGGER.debug("Numeric conjugate at %s: %d iterations, |grad| = %.2e", q, res.nit, grad_norm)
    return float(-res.fun)


def scaling_check(ctx: DriverContext, z: ArrayLike, alpha: float, alpha_ref: float = 1.0) -> np.ndarray:
    """|alpha f^alpha(z) - alpha_ref f^alpha_ref(alpha z / alpha_ref)| for cone constraints."""
    _require_cone(ctx, "The scaling identity")
    z = asVector(z, ctx.m)
    lhs = alpha * primal_driver(ctx.with_alpha(alpha), z)
    rhs = alpha_ref * primal_driver(ctx.with_alpha(alpha_ref), alpha * z / alpha_ref)
    return np.abs(lhs - rhs)
