"""Explicit monotone finite differences for one dimensional semilinear PDEs.

Solves u_t + 1/2 u_vv + H(t, v, u_v) = 0 backward from u(T, .) = F on a
truncated interval. Central differences are used for u_v; wherever the cell
Peclet number |H_p| dv exceeds 1 a Lax-Friedrichs viscosity a dv / 2 replaces
the physical diffusion so the scheme stays monotone. The step size follows
dt <= cfl dv^2 / (2 D) and shrinks as max |H_p| grows.
"""
import dataclasses
import logging
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import ModelValidationError, NonFiniteError

_LOGGER = logging.getLogger(__name__)

DEFAULT_POINTS = 801
DEFAULT_DOMAIN_SDS = 8.0
DEFAULT_CFL = 0.9

# (t, v, p) -> (H, dH/dp)
Hamiltonian = Callable[[float, np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]]


@dataclasses.dataclass(frozen=True)
class SpaceGrid:
    """Uniform grid on [lower, upper]."""

    lower: float
    upper: float
    points: int

    def __post_init__(self) -> None:
        """Validate the grid."""
        if self.points < 5 or not self.upper > self.lower:
            raise ModelValidationError(
                "need at least 5 points on a nonempty interval", field="asymptotics.grid_points"
            )

    @staticmethod
    def around(center: float, width_sd: float, sds: float = DEFAULT_DOMAIN_SDS,
               points: int = DEFAULT_POINTS) -> "SpaceGrid":
        """Interval center +- sds standard deviations."""
        half = sds * width_sd
        return SpaceGrid(center - half, center + half, points)

    @property
    def v(self) -> np.ndarray:
        """Grid nodes."""
        return np.linspace(self.lower, self.upper, self.points)

    @property
    def dv(self) -> float:
        """Grid spacing."""
        return (self.upper - self.lower) / (self.points - 1)

    def coarsened(self) -> "SpaceGrid":
        """Every other node."""
        return SpaceGrid(self.lower, self.upper, (self.points - 1) // 2 + 1)


@dataclasses.dataclass(frozen=True, eq=False)
class FdmSolution:
    """u on the space grid at the requested times (descending from T to 0)."""

    grid: SpaceGrid
    times: np.ndarray
    u: np.ndarray
    steps: int
    refinements: int
    viscous_steps: int

    @property
    def u0(self) -> np.ndarray:
        """u(0, .)."""
        return self.u[-1]

    def value(self, v0: float) -> float:
        """u(0, v0) by linear interpolation."""
        return float(np.interp(v0, self.grid.v, self.u0))

    def at(self, k: int, v: np.ndarray) -> np.ndarray:
        """u(times[k], v) by interpolation."""
        return np.interp(v, self.grid.v, self.u[k])

    def slope(self, k: int, v: np.ndarray) -> np.ndarray:
        """u_v(times[k], v) by interpolation of central differences."""
        return np.interp(v, self.grid.v, np.gradient(self.u[k], self.grid.dv))


def solve_backward(
    terminal: np.ndarray,
    grid: SpaceGrid,
    horizon: float,
    hamiltonian: Hamiltonian,
    save_times: Optional[Sequence[float]] = None,
    cfl: float = DEFAULT_CFL,
) -> FdmSolution:
    """March from t = horizon down to t = 0, saving u at save_times (and at 0)."""
    v = grid.v
    dv = grid.dv
    u = np.array(terminal, dtype=float)
    if u.shape != v.shape:
        raise ModelValidationError(f"terminal values need shape {v.shape}, got {u.shape}")
    targets = sorted({float(t) for t in (save_times or [])} | {0.0}, reverse=True)
    targets = [t for t in targets if t < horizon] or [0.0]
    saved: List[np.ndarray] = [u.copy()]
    times: List[float] = [horizon]
    t = horizon
    steps = refinements = viscous = 0
    last_dt = np.inf
    inner = v[1:-1]
    for target in targets:
        while t > target + 1e-14 * max(1.0, horizon):
            p = (u[2:] - u[:-2]) / (2 * dv)
            h, h_p = hamiltonian(t, inner, p)
            a = float(np.max(np.abs(h_p))) if h_p.size else 0.0
            diffusion = max(0.5, 0.5 * a * dv)
            dt = cfl * dv * dv / (2.0 * diffusion)
            if dt < 0.99 * last_dt and np.isfinite(last_dt):
                refinements += 1
                _LOGGER.debug("CFL refinement at t=%.6g: dt %.3e -> %.3e (a=%.3g)", t, last_dt, dt, a)
            last_dt = dt
            if diffusion > 0.5:
                viscous += 1
            dt = min(dt, t - target)
            lap = (u[2:] - 2.0 * u[1:-1] + u[:-2]) / (dv * dv)
            u[1:-1] = u[1:-1] + dt * (diffusion * lap + h)
            u[0] = 2.0 * u[1] - u[2]
            u[-1] = 2.0 * u[-2] - u[-3]
            t -= dt
            steps += 1
            if not np.all(np.isfinite(u)):
                raise NonFiniteError("finite difference solution is not finite", where={"t": t})
        t = target
        saved.append(u.copy())
        times.append(target)
    if viscous:
        _LOGGER.debug("%d of %d steps needed artificial viscosity", viscous, steps)
    _LOGGER.debug("Finite differences: %d steps, %d refinements on %d points", steps, refinements, grid.points)
    return FdmSolution(grid, np.array(times), np.array(saved), steps, refinements, viscous)


def richardson(
    terminal_fn: Callable[[np.ndarray], np.ndarray],
    grid: SpaceGrid,
    horizon: float,
    hamiltonian: Hamiltonian,
    v0: float,
    save_times: Optional[Sequence[float]] = None,
    cfl: float = DEFAULT_CFL,
) -> Tuple[FdmSolution, float]:
    """Solve on the grid and on every other node; the error estimate is |fine - coarse|."""
    fine = solve_backward(terminal_fn(grid.v), grid, horizon, hamiltonian, save_times, cfl)
    coarse_grid = grid.coarsened()
    coarse = solve_backward(terminal_fn(coarse_grid.v), coarse_grid, horizon, hamiltonian, None, cfl)
    return fine, abs(fine.value(v0) - coarse.value(v0))
