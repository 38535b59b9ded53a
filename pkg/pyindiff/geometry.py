"""Closed convex constraint sets, their projections and their images under σᵗ.

Supported variants:
FULL     -- the whole strategy space R^d
ZERO     -- the origin only (no trading)
SUBSPACE -- the span of an orthonormal basis
CONE     -- the polyhedral cone generated by a finite list of vectors
BOX      -- a coordinate box lower <= x <= upper with lower <= 0 <= upper

Every variant contains 0. All operations accept a single vector of shape (dim,)
or a batch of shape (..., dim) and are pure.
"""
import dataclasses
import itertools
import logging
from enum import Enum
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize

from .exceptions import ConvergenceError, DimensionMismatchError, ModelValidationError
from .vec import ArrayLike, asVector, matTVec, matVec, vecLenSq

_LOGGER = logging.getLogger(__name__)

# KKT tolerance of the small quadratic programs
QP_TOLERANCE = 1.0e-10
# above this many generators the face enumeration is replaced by NNLS per point
MAX_ENUMERATED_GENERATORS = 8


class SetKind(Enum):
    """Constraint set variants."""

    FULL = "full"
    ZERO = "zero"
    SUBSPACE = "subspace"
    CONE = "cone"
    BOX = "box"


@dataclasses.dataclass(frozen=True, eq=False)
class ConstraintSet:
    """A closed convex set C in R^dim containing the origin."""

    kind: SetKind
    dim: int
    basis: Optional[np.ndarray] = None
    generators: Optional[np.ndarray] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    @property
    def is_cone(self) -> bool:
        """Return True if the set is closed under nonnegative scaling."""
        return self.kind is not SetKind.BOX

    @property
    def is_subspace(self) -> bool:
        """Return True if the set is a linear subspace."""
        return self.kind in (SetKind.FULL, SetKind.ZERO, SetKind.SUBSPACE)

    @staticmethod
    def full(dim: int) -> "ConstraintSet":
        """Unconstrained strategies."""
        return ConstraintSet(SetKind.FULL, _check_dim(dim))

    @staticmethod
    def zero(dim: int) -> "ConstraintSet":
        """No trading at all."""
        return ConstraintSet(SetKind.ZERO, _check_dim(dim))

    @staticmethod
    def subspace(basis: ArrayLike) -> "ConstraintSet":
        """Span of the given vectors, stored with an orthonormal basis."""
        vectors = np.atleast_2d(np.asarray(basis, dtype=float))
        dim = vectors.shape[1]
        q, r = np.linalg.qr(vectors.T)
        rank = int(np.sum(np.abs(np.diag(r)) > 1e-12 * max(1.0, np.abs(r).max())))
        if rank == 0:
            return ConstraintSet.zero(dim)
        if rank == dim:
            return ConstraintSet.full(dim)
        return ConstraintSet(SetKind.SUBSPACE, dim, basis=q[:, :rank].T.copy())

    @staticmethod
    def cone(generators: ArrayLike) -> "ConstraintSet":
        """Polyhedral cone {G^T lambda : lambda >= 0}."""
        gens = np.atleast_2d(np.asarray(generators, dtype=float))
        if gens.size == 0:
            raise ModelValidationError("A cone needs at least one generator")
        return ConstraintSet(SetKind.CONE, _check_dim(gens.shape[1]), generators=gens)

    @staticmethod
    def box(lower: ArrayLike, upper: ArrayLike) -> "ConstraintSet":
        """Coordinate box containing the origin."""
        lo = np.atleast_1d(np.asarray(lower, dtype=float))
        hi = np.atleast_1d(np.asarray(upper, dtype=float))
        if lo.shape != hi.shape:
            raise DimensionMismatchError("Box bounds must have the same dimension")
        if np.any(lo > 0) or np.any(hi < 0):
            raise ModelValidationError("Box bounds must satisfy lower <= 0 <= upper")
        return ConstraintSet(SetKind.BOX, _check_dim(lo.size), lower=lo, upper=hi)

    @staticmethod
    def from_config(record: Dict[str, Any], dim: int) -> "ConstraintSet":
        """Build a set from its tagged config record, e.g. {"kind": "cone", ...}."""
        kind = record.get("kind")
        if kind == "full":
            return ConstraintSet.full(dim)
        if kind == "zero":
            return ConstraintSet.zero(dim)
        if kind == "subspace":
            built = ConstraintSet.subspace(_field(record, "basis"))
        elif kind == "cone":
            built = ConstraintSet.cone(_field(record, "generators"))
        elif kind == "box":
            built = ConstraintSet.box(_field(record, "lower"), _field(record, "upper"))
        else:
            raise ModelValidationError(
                f"Unknown constraint kind {kind!r}, expected one of "
                f"{[k.value for k in SetKind]}",
                field="constraint.kind",
            )
        if built.dim != dim:
            raise ModelValidationError(
                f"Constraint lives in R^{built.dim} but the market has {dim} assets",
                field="constraint",
            )
        return built

    def as_dict(self) -> Dict[str, Any]:
        """Convert back to a config record."""
        record: Dict[str, Any] = {"kind": self.kind.value}
        if self.basis is not None:
            record["basis"] = self.basis.tolist()
        if self.generators is not None:
            record["generators"] = self.generators.tolist()
        if self.lower is not None and self.upper is not None:
            record["lower"] = self.lower.tolist()
            record["upper"] = self.upper.tolist()
        return record

    def contains(self, x: ArrayLike, tol: float = 1e-8) -> np.ndarray:
        """Membership test with an absolute tolerance."""
        arr = asVector(x, self.dim)
        return dist2(self, arr) <= tol**2 * (1.0 + vecLenSq(arr))


def _check_dim(dim: int) -> int:
    if dim < 1:
        raise ModelValidationError(f"Dimension must be positive, got {dim}")
    return int(dim)


def _field(record: Dict[str, Any], key: str) -> Any:
    if key not in record:
        raise ModelValidationError("missing field", field=f"constraint.{key}")
    return record[key]


def nonnegative_projection(
    columns: np.ndarray, x: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Project x onto the cone generated by the columns of a (batch of) matrix.

    Solves min |A lambda - x|^2 over lambda >= 0 for A of shape (..., m, k) and
    x of shape (..., m). Returns (lambda, A lambda).
    """
    k = columns.shape[-1]
    batch = np.broadcast_shapes(columns.shape[:-2], x.shape[:-1])
    if k > MAX_ENUMERATED_GENERATORS:
        return _nnls_projection(columns, x, batch)

    best_point = np.zeros(batch + (x.shape[-1],))
    best_coeff = np.zeros(batch + (k,))
    best_dist = vecLenSq(np.broadcast_to(x, best_point.shape)).copy()
    max_face = min(k, x.shape[-1])
    for size in range(1, max_face + 1):
        for face in itertools.combinations(range(k), size):
            sub = columns[..., list(face)]
            coeff = matVec(np.linalg.pinv(sub), x)
            feasible = np.all(coeff >= -QP_TOLERANCE, axis=-1)
            if not np.any(feasible):
                continue
            coeff = np.maximum(coeff, 0.0)
            point = matVec(sub, coeff)
            dist = vecLenSq(point - x)
            better = feasible & (dist < best_dist)
            if np.any(better):
                best_dist = np.where(better, dist, best_dist)
                best_point = np.where(better[..., None], point, best_point)
                full_coeff = np.zeros(batch + (k,))
                full_coeff[..., list(face)] = np.broadcast_to(coeff, batch + (size,))
                best_coeff = np.where(better[..., None], full_coeff, best_coeff)
    return best_coeff, best_point


def _nnls_projection(
    columns: np.ndarray, x: np.ndarray, batch: Tuple[int, ...]
) -> Tuple[np.ndarray, np.ndarray]:
    """Active-set NNLS per point, for cones with many generators."""
    cols = np.broadcast_to(columns, batch + columns.shape[-2:]).reshape(
        (-1,) + columns.shape[-2:]
    )
    xs = np.broadcast_to(x, batch + x.shape[-1:]).reshape(-1, x.shape[-1])
    coeff = np.empty((xs.shape[0], columns.shape[-1]))
    for i in range(xs.shape[0]):
        try:
            coeff[i], _ = optimize.nnls(cols[i], xs[i])
        except RuntimeError as ex:
            raise ConvergenceError(
                f"NNLS projection failed: {ex}", iterations=3 * columns.shape[-1]
            ) from ex
    coeff = coeff.reshape(batch + (columns.shape[-1],))
    return coeff, matVec(columns, coeff)


def project(set_: ConstraintSet, x: ArrayLike) -> np.ndarray:
    """Return the nearest point of the set."""
    arr = asVector(x, set_.dim)
    if set_.kind is SetKind.FULL:
        return arr.copy()
    if set_.kind is SetKind.ZERO:
        return np.zeros_like(arr)
    if set_.kind is SetKind.SUBSPACE:
        assert set_.basis is not None
        return matTVec(set_.basis, matVec(set_.basis, arr))
    if set_.kind is SetKind.BOX:
        return np.clip(arr, set_.lower, set_.upper)
    assert set_.generators is not None
    _, point = nonnegative_projection(set_.generators.T, arr)
    return point


def dist2(set_: ConstraintSet, x: ArrayLike) -> np.ndarray:
    """Squared distance to the set, |x - Proj(x)|^2."""
    arr = asVector(x, set_.dim)
    return vecLenSq(arr - project(set_, arr))


def support(set_: ConstraintSet, v: ArrayLike, tol: float = 1e-10) -> np.ndarray:
    """Support function sup_{z in C} z^T v, with +inf where unbounded."""
    arr = asVector(v, set_.dim)
    scale = tol * (1.0 + np.sqrt(vecLenSq(arr)))
    if set_.kind is SetKind.BOX:
        assert set_.lower is not None and set_.upper is not None
        return np.sum(np.maximum(set_.lower * arr, set_.upper * arr), axis=-1)
    bounded = _polar_membership(set_, arr, scale)
    return np.where(bounded, 0.0, np.inf)


def in_barrier_cone(set_: ConstraintSet, v: ArrayLike, tol: float = 1e-10) -> np.ndarray:
    """Return True where support(set, v) is finite; cones only."""
    if not set_.is_cone:
        raise ModelValidationError(
            f"The barrier cone membership test needs a cone, got {set_.kind.value}"
        )
    arr = asVector(v, set_.dim)
    return _polar_membership(set_, arr, tol * (1.0 + np.sqrt(vecLenSq(arr))))


def _polar_membership(set_: ConstraintSet, v: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """v^T z <= 0 for every z in the cone."""
    if set_.kind is SetKind.ZERO:
        return np.ones(v.shape[:-1], dtype=bool)
    if set_.kind is SetKind.FULL:
        return np.sqrt(vecLenSq(v)) <= scale
    if set_.kind is SetKind.SUBSPACE:
        assert set_.basis is not None
        return np.sqrt(vecLenSq(matVec(set_.basis, v))) <= scale
    assert set_.generators is not None
    return np.all(matVec(set_.generators, v) <= scale[..., None], axis=-1)


@dataclasses.dataclass(frozen=True, eq=False)
class ImageSet:
    """The image sigma^T C of a constraint set, for one or a batch of sigmas.

    sigma has shape (..., d, m); the image lives in R^m.
    """

    base: ConstraintSet
    sigma: np.ndarray

    def __post_init__(self) -> None:
        """Check the shapes."""
        if self.sigma.ndim < 2 or self.sigma.shape[-2] != self.base.dim:
            raise DimensionMismatchError(
                f"sigma of shape {self.sigma.shape} does not map R^{self.base.dim}"
            )

    @property
    def m(self) -> int:
        """Dimension of the image space."""
        return int(self.sigma.shape[-1])

    @property
    def sigma_t(self) -> np.ndarray:
        """The linear map sigma^T as an (..., m, d) array."""
        return np.swapaxes(self.sigma, -1, -2)

    def take(self, index: Any) -> "ImageSet":
        """Restrict a batched image to a subset of the batch."""
        if self.sigma.ndim == 2:
            return self
        return ImageSet(self.base, self.sigma[index])


def project_image(img: ImageSet, x: ArrayLike) -> Tuple[np.ndarray, np.ndarray]:
    """Return (sigma^T pi*, pi*) where pi* minimizes |sigma^T pi - x|^2 over C."""
    arr = asVector(x, img.m)
    base = img.base
    st = img.sigma_t
    if base.kind is SetKind.ZERO:
        batch = np.broadcast_shapes(st.shape[:-2], arr.shape[:-1])
        return np.zeros(batch + (img.m,)), np.zeros(batch + (base.dim,))
    if base.kind is SetKind.FULL:
        pi = matVec(np.linalg.pinv(st), arr)
        return matVec(st, pi), pi
    if base.kind is SetKind.SUBSPACE:
        assert base.basis is not None
        cols = np.einsum("...md,rd->...mr", st, base.basis)
        coeff = matVec(np.linalg.pinv(cols), arr)
        return matVec(cols, coeff), matTVec(base.basis, coeff)
    if base.kind is SetKind.CONE:
        assert base.generators is not None
        cols = np.einsum("...md,kd->...mk", st, base.generators)
        coeff, point = nonnegative_projection(cols, arr)
        return point, matTVec(base.generators, coeff)
    return _project_image_box(img, arr)


def _project_image_box(img: ImageSet, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Bounded least squares onto sigma^T(box)."""
    base = img.base
    assert base.lower is not None and base.upper is not None
    st = img.sigma_t
    if base.dim == 1:
        col = st[..., 0]
        norm2 = np.maximum(vecLenSq(col), 1e-300)
        pi = np.clip(np.einsum("...m,...m->...", col, x) / norm2, base.lower[0], base.upper[0])
        pi = pi[..., None]
        return matVec(st, pi), pi
    batch = np.broadcast_shapes(st.shape[:-2], x.shape[:-1])
    mats = np.broadcast_to(st, batch + st.shape[-2:]).reshape((-1,) + st.shape[-2:])
    xs = np.broadcast_to(x, batch + x.shape[-1:]).reshape(-1, x.shape[-1])
    pis = np.empty((xs.shape[0], base.dim))
    for i in range(xs.shape[0]):
        res = optimize.lsq_linear(mats[i], xs[i], bounds=(base.lower, base.upper), tol=QP_TOLERANCE)
        if res.status <= 0:
            raise ConvergenceError(
                f"Box projection failed: {res.message}", iterations=int(res.nit),
                residual=float(np.max(np.abs(res.fun))),
            )
        pis[i] = res.x
    pi = pis.reshape(batch + (base.dim,))
    return matVec(st, pi), pi


def image_dist2(img: ImageSet, x: ArrayLike) -> np.ndarray:
    """Squared distance from x to sigma^T C."""
    arr = asVector(x, img.m)
    point, _ = project_image(img, arr)
    return vecLenSq(arr - point)


def image_support(img: ImageSet, v: ArrayLike) -> np.ndarray:
    """Support function of sigma^T C, equal to the support of C at sigma v."""
    arr = asVector(v, img.m)
    return support(img.base, matVec(img.sigma, arr))


def in_image_barrier_cone(img: ImageSet, v: ArrayLike) -> np.ndarray:
    """Barrier cone membership of v for the cone sigma^T C."""
    arr = asVector(v, img.m)
    return in_barrier_cone(img.base, matVec(img.sigma, arr))


def project_barrier_cone(img: ImageSet, v: ArrayLike) -> np.ndarray:
    """Project onto the barrier (polar) cone of sigma^T C, v - Proj_{sigma^T C}(v)."""
    if not img.base.is_cone:
        raise ModelValidationError("The barrier cone projection needs a cone constraint")
    arr = asVector(v, img.m)
    point, _ = project_image(img, arr)
    return arr - point


def sample_directions(dim: int, count: int, seed: int = 0) -> np.ndarray:
    """Axis directions followed by seeded random unit directions."""
    axes = np.concatenate([np.eye(dim), -np.eye(dim)])
    extra = max(0, count - axes.shape[0])
    rng = np.random.Generator(np.random.Philox(key=seed))
    rand = rng.standard_normal((extra, dim))
    rand /= np.linalg.norm(rand, axis=1, keepdims=True)
    return np.concatenate([axes, rand])[:max(count, 1)]


def describe(set_: ConstraintSet) -> str:
    """Short human readable label of a set."""
    if set_.kind is SetKind.CONE:
        assert set_.generators is not None
        return f"cone({set_.generators.shape[0]} generators in R^{set_.dim})"
    return f"{set_.kind.value}(R^{set_.dim})"


def as_sigma(matrix: Sequence[Sequence[float]]) -> np.ndarray:
    """Return a constant volatility matrix as a (d, m) array."""
    return np.atleast_2d(np.asarray(matrix, dtype=float))
