"""Seeded path simulation, stochastic exponentials and relative entropy."""
import dataclasses
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from .exceptions import ModelValidationError, NonFiniteError, ReportError
from .model import MarketModel, theta
from .models import Estimate
from .utils import default_threads
from .vec import matVec, vecDot, vecLenSq

_LOGGER = logging.getLogger(__name__)

BLOCK_SIZE = 4096
ESS_WARNING_FRACTION = 0.05
MAX_CSV_ROWS = 2_000_000


@dataclasses.dataclass(frozen=True)
class TimeGrid:
    """Uniform grid 0 = t_0 < ... < t_K = T."""

    horizon: float
    steps: int

    def __post_init__(self) -> None:
        """Validate the grid."""
        if not self.horizon > 0:
            raise ModelValidationError("must be positive", field="model.horizon")
        if self.steps < 1:
            raise ModelValidationError("need at least one step", field="solver.steps")

    @property
    def dt(self) -> float:
        """Step size T/K."""
        return self.horizon / self.steps

    @property
    def nodes(self) -> np.ndarray:
        """The K+1 grid nodes."""
        return np.linspace(0.0, self.horizon, self.steps + 1)

    def coarsened(self, factor: int = 2) -> "TimeGrid":
        """Grid with factor times fewer steps."""
        if self.steps % factor:
            raise ModelValidationError(
                f"{self.steps} steps cannot be coarsened by {factor}", field="solver.steps"
            )
        return TimeGrid(self.horizon, self.steps // factor)


@dataclasses.dataclass(frozen=True, eq=False)
class PathEnsemble:
    """Brownian increments and the state paths they drive.

    dB has shape (N, K, m); s and b hold the prices and the Brownian motion at
    every node, (N, K+1, d) and (N, K+1, m); v is (N, K+1) or None. theta and
    sigma are the coefficients at the left node of every step.
    """

    model: MarketModel
    grid: TimeGrid
    seed: int
    dB: np.ndarray
    s: np.ndarray
    b: np.ndarray
    v: Optional[np.ndarray]
    theta: np.ndarray
    sigma: np.ndarray

    @property
    def n_paths(self) -> int:
        """Number of paths N."""
        return int(self.dB.shape[0])

    def env_at(self, i: int) -> Dict[str, Any]:
        """Variable bindings at node i."""
        return self.model.env(
            self.grid.nodes[i],
            self.s[:, i],
            None if self.v is None else self.v[:, i],
            self.b[:, i],
        )

    def subset(self, index: Union[slice, np.ndarray]) -> "PathEnsemble":
        """Restrict to a subset of the paths."""
        return dataclasses.replace(
            self,
            dB=self.dB[index],
            s=self.s[index],
            b=self.b[index],
            v=None if self.v is None else self.v[index],
            theta=self.theta[index],
            sigma=self.sigma[index],
        )


def _block_increments(seed: int, block: int, size: int, grid: TimeGrid, m: int) -> np.ndarray:
    """Increments of one block; the block index sits in the Philox counter."""
    bit_gen = np.random.Philox(key=seed, counter=[0, 0, 0, block])
    rng = np.random.Generator(bit_gen)
    return rng.standard_normal((size, grid.steps, m)) * math.sqrt(grid.dt)


def _integrate(model: MarketModel, grid: TimeGrid, dB: np.ndarray) -> Tuple[np.ndarray, ...]:
    """Log-Euler for the prices, Euler-Maruyama for the factor."""
    n, steps, m = dB.shape
    dt = grid.dt
    nodes = grid.nodes
    log_s = np.empty((n, steps + 1, model.d))
    log_s[:, 0] = np.log(model.s0)
    b = np.zeros((n, steps + 1, m))
    b[:, 1:] = np.cumsum(dB, axis=1)
    v = None
    if model.factor is not None:
        v = np.empty((n, steps + 1))
        v[:, 0] = model.factor.v0
    thetas = np.empty((n, steps, m))
    sigmas = np.empty((n, steps, model.d, m))
    for i in range(steps):
        env = model.env(nodes[i], np.exp(log_s[:, i]), None if v is None else v[:, i], b[:, i])
        drift = np.broadcast_to(model.drift_at(env), (n, model.d))
        sigma = np.broadcast_to(model.sigma_at(env), (n, model.d, m))
        if not (np.all(np.isfinite(drift)) and np.all(np.isfinite(sigma))):
            bad = int(np.argmin(np.all(np.isfinite(drift), axis=-1)))
            raise NonFiniteError(
                "coefficient evaluation is not finite",
                where={"t": float(nodes[i]), "s": np.exp(log_s[bad, i]).tolist()},
            )
        sigmas[:, i] = sigma
        thetas[:, i] = np.broadcast_to(theta(model, nodes[i], env), (n, m))
        log_s[:, i + 1] = (
            log_s[:, i]
            + (drift - 0.5 * np.sum(sigma**2, axis=-1)) * dt
            + matVec(sigma, dB[:, i])
        )
        if v is not None:
            assert model.factor is not None
            v[:, i + 1] = (
                v[:, i]
                + model.factor_drift(nodes[i], v[:, i]) * dt
                + dB[:, i] @ model.factor.kappa
            )
            if not np.all(np.isfinite(v[:, i + 1])):
                raise NonFiniteError("factor path is not finite", where={"t": float(nodes[i + 1])})
    return np.exp(log_s), b, v, thetas, sigmas


def simulate(
    model: MarketModel,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    threads: Optional[int] = None,
    block_size: int = BLOCK_SIZE,
) -> PathEnsemble:
    """Simulate N paths; the result depends on (seed, N, K) only, never on the thread count."""
    if n_paths < 2:
        raise ModelValidationError("need at least two paths", field="solver.paths")
    if seed < 0:
        raise ModelValidationError("must be nonnegative", field="solver.seed")
    sizes = [min(block_size, n_paths - start) for start in range(0, n_paths, block_size)]

    def run_block(block: int) -> Tuple[np.ndarray, ...]:
        dB = _block_increments(seed, block, sizes[block], grid, model.m)
        return (dB,) + _integrate(model, grid, dB)

    workers = min(default_threads(threads), len(sizes))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run_block, range(len(sizes))))
    else:
        parts = [run_block(block) for block in range(len(sizes))]

    def stack(k: int) -> Any:
        if parts[0][k] is None:
            return None
        return np.concatenate([p[k] for p in parts])

    ensemble = PathEnsemble(
        model=model, grid=grid, seed=seed, dB=stack(0), s=stack(1), b=stack(2),
        v=stack(3), theta=stack(4), sigma=stack(5),
    )
    _LOGGER.debug(
        "Simulated %d paths x %d steps (seed %d, %d blocks, %d workers)",
        n_paths, grid.steps, seed, len(sizes), workers,
    )
    return ensemble


def coarsen(ensemble: PathEnsemble, factor: int = 2) -> PathEnsemble:
    """Same Brownian paths on a grid with factor times fewer steps."""
    grid = ensemble.grid.coarsened(factor)
    n, _, m = ensemble.dB.shape
    dB = ensemble.dB.reshape(n, grid.steps, factor, m).sum(axis=2)
    s, b, v, thetas, sigmas = _integrate(ensemble.model, grid, dB)
    return PathEnsemble(ensemble.model, grid, ensemble.seed, dB, s, b, v, thetas, sigmas)


@dataclasses.dataclass(frozen=True, eq=False)
class MeasureChange:
    """Density process L^q of dQ/dP = E(int q^T dB), kept in log space."""

    ensemble: PathEnsemble
    q: np.ndarray
    log_density: np.ndarray

    @property
    def density(self) -> np.ndarray:
        """L^q at every node, (N, K+1)."""
        return np.exp(self.log_density)

    @property
    def weights(self) -> np.ndarray:
        """Terminal weights L^q_T."""
        return np.exp(self.log_density[:, -1])

    def effective_sample_size(self) -> float:
        """Kish effective sample size of the terminal weights."""
        log_w = self.log_density[:, -1]
        w = np.exp(log_w - np.max(log_w))
        return float(np.sum(w) ** 2 / np.sum(w**2))


def stoch_exponential(q_path: np.ndarray, ensemble: PathEnsemble) -> MeasureChange:
    """L_{i+1} = L_i exp(q_i^T dB_i - |q_i|^2 dt / 2), L_0 = 1."""
    n, steps, m = ensemble.dB.shape
    q = np.broadcast_to(np.asarray(q_path, dtype=float), (n, steps, m))
    if not np.all(np.isfinite(q)):
        path, step = np.argwhere(~np.all(np.isfinite(q), axis=-1))[0]
        raise NonFiniteError("density integrand is not finite", where=(int(path), int(step)))
    increments = vecDot(q, ensemble.dB) - 0.5 * vecLenSq(q) * ensemble.grid.dt
    log_density = np.zeros((n, steps + 1))
    np.cumsum(increments, axis=1, out=log_density[:, 1:])
    return MeasureChange(ensemble, q, log_density)


@dataclasses.dataclass(frozen=True)
class EntropyEstimate:
    """E[L ln L] and its Girsanov form E^Q[int |q|^2/2 dt]."""

    direct: Estimate
    girsanov: Estimate
    discrepancy: Estimate

    @property
    def value(self) -> float:
        """The direct estimate."""
        return self.direct.value

    def as_dict(self) -> Dict[str, Any]:
        """Convert to a dict."""
        return {
            "direct": self.direct.as_dict(),
            "girsanov": self.girsanov.as_dict(),
            "discrepancy": self.discrepancy.as_dict(),
        }


def relative_entropy(mc: MeasureChange) -> EntropyEstimate:
    """Two estimators of the relative entropy of Q^q with respect to P."""
    w = mc.weights
    log_w = mc.log_density[:, -1]
    direct = w * log_w
    cost = 0.5 * np.sum(vecLenSq(mc.q), axis=1) * mc.ensemble.grid.dt
    girsanov = w * cost
    return EntropyEstimate(
        Estimate.from_samples(direct),
        Estimate.from_samples(girsanov),
        Estimate.from_samples(direct - girsanov),
    )


def reweighted_expectation(
    mc: MeasureChange, functional: Union[np.ndarray, Callable[[PathEnsemble], np.ndarray]]
) -> Estimate:
    """E^{Q^q}[functional] = E[L_T functional] with its standard error."""
    values = functional(mc.ensemble) if callable(functional) else np.asarray(functional, dtype=float)
    values = np.broadcast_to(values, (mc.ensemble.n_paths,))
    ess = mc.effective_sample_size()
    if ess < ESS_WARNING_FRACTION * mc.ensemble.n_paths:
        _LOGGER.warning(
            "Effective sample size %.0f is below %.0f%% of %d paths",
            ess, 100 * ESS_WARNING_FRACTION, mc.ensemble.n_paths,
        )
    return Estimate.from_samples(mc.weights * values)


def young_inequality_gap(x: np.ndarray, y: np.ndarray, p: float) -> np.ndarray:
    """x ln x / p - x ln p / p + exp(p y) - x y, nonnegative for x > 0 and p > 0."""
    x = np.asarray(x, dtype=float)
    return x * np.log(x) / p - x * math.log(p) / p + np.exp(p * np.asarray(y)) - x * y


def simulate_wealth(ensemble: PathEnsemble, pi: np.ndarray, x0: float) -> np.ndarray:
    """X_{i+1} = X_i + pi_i^T sigma_i (dB_i + theta_i dt), shape (N, K+1)."""
    n, steps, _ = ensemble.dB.shape
    noise = ensemble.dB + ensemble.theta * ensemble.grid.dt
    gains = np.einsum("nkd,nkdm,nkm->nk", pi, ensemble.sigma, noise)
    wealth = np.empty((n, steps + 1))
    wealth[:, 0] = x0
    np.cumsum(gains, axis=1, out=wealth[:, 1:])
    wealth[:, 1:] += x0
    if not np.all(np.isfinite(wealth)):
        raise NonFiniteError("wealth overflow", where=("path", int(np.argmin(np.all(np.isfinite(wealth), axis=1)))))
    return wealth


def to_frame(ensemble: PathEnsemble, max_rows: int = MAX_CSV_ROWS) -> pd.DataFrame:
    """One row per path per node."""
    n, nodes = ensemble.n_paths, ensemble.grid.steps + 1
    if n * nodes > max_rows:
        raise ReportError(
            f"Ensemble export would write {n * nodes} rows, the limit is {max_rows}"
        )
    columns: Dict[str, np.ndarray] = {
        "path": np.repeat(np.arange(n), nodes),
        "node": np.tile(np.arange(nodes), n),
        "t": np.tile(ensemble.grid.nodes, n),
    }
    for i in range(ensemble.model.d):
        columns[f"s{i + 1}"] = ensemble.s[:, :, i].ravel()
    if ensemble.v is not None:
        columns["v"] = ensemble.v.ravel()
    for j in range(ensemble.model.m):
        columns[f"b{j + 1}"] = ensemble.b[:, :, j].ravel()
    return pd.DataFrame(columns)


def export_csv(ensemble: PathEnsemble, path: str, max_rows: int = MAX_CSV_ROWS) -> None:
    """Write the ensemble for debugging."""
    try:
        to_frame(ensemble, max_rows).to_csv(path, index=False, float_format="%.12g")
    except OSError as ex:
        raise ReportError(f"Cannot write {path}: {ex}") from ex


def split_halves(ensemble: PathEnsemble) -> List[PathEnsemble]:
    """First and second half of the paths, for sqrt(N) consistency checks."""
    half = ensemble.n_paths // 2
    return [ensemble.subset(slice(0, half)), ensemble.subset(slice(half, 2 * half))]
