"""Tests for path simulation and measure changes."""
import math

import numpy as np
import pandas as pd
import pytest

from pyindiff.exceptions import ModelValidationError, ReportError
from pyindiff.paths import (
    TimeGrid,
    coarsen,
    export_csv,
    reweighted_expectation,
    relative_entropy,
    simulate,
    simulate_wealth,
    split_halves,
    stoch_exponential,
    to_frame,
    young_inequality_gap,
)
from pyindiff.tests.fixtures import brownian_market, factor_market, incomplete_market, paths


def test_time_grid() -> None:
    """Test the grid nodes and coarsening."""
    grid = TimeGrid(1.0, 4)
    assert grid.dt == 0.25
    assert grid.nodes.tolist() == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert grid.coarsened().steps == 2
    with pytest.raises(ModelValidationError):
        TimeGrid(1.0, 3).coarsened()
    with pytest.raises(ModelValidationError):
        TimeGrid(0.0, 3)


def test_thread_count_does_not_change_paths() -> None:
    """Test the increments depend on the seed only."""
    model = incomplete_market()
    grid = TimeGrid(1.0, 5)
    one = simulate(model, grid, 3000, seed=5, threads=1, block_size=512)
    four = simulate(model, grid, 3000, seed=5, threads=4, block_size=512)
    assert np.array_equal(one.dB, four.dB)
    assert np.array_equal(one.s, four.s)
    other = simulate(model, grid, 3000, seed=6, threads=1, block_size=512)
    assert not np.array_equal(one.dB, other.dB)


def test_simulate_validation() -> None:
    """Test the path count and the seed are checked."""
    model = brownian_market()
    with pytest.raises(ModelValidationError):
        simulate(model, TimeGrid(1.0, 2), 1, seed=0)
    with pytest.raises(ModelValidationError):
        simulate(model, TimeGrid(1.0, 2), 10, seed=-1)


def test_log_euler_is_exact_for_constant_coefficients() -> None:
    """Test S_T = exp((b - sigma^2/2)T + sigma B_T)."""
    ens = paths(brownian_market(b=0.1, sigma=0.3), n_paths=200, steps=10)
    expected = np.exp((0.1 - 0.045) + 0.3 * ens.b[:, -1, 0])
    assert np.allclose(ens.s[:, -1, 0], expected)
    assert ens.dB.shape == (200, 10, 1)


def test_driftless_factor() -> None:
    """Test V_T = kappa^T B_T without a factor drift."""
    model = factor_market()
    ens = paths(model, n_paths=200, steps=10)
    assert ens.v is not None
    assert np.allclose(ens.v[:, -1], ens.b[:, -1] @ np.array([0.6, 0.8]))
    assert np.allclose(ens.theta[..., 0], 0.3)


def test_coarsen() -> None:
    """Test the coarse ensemble reuses the fine Brownian paths."""
    ens = paths(brownian_market(), n_paths=100, steps=8)
    coarse = coarsen(ens)
    assert coarse.grid.steps == 4
    assert np.allclose(coarse.b, ens.b[:, ::2])


def test_stochastic_exponential_mean_and_entropy() -> None:
    """Test E[L_T] = 1 and H(Q|P) = |q|^2 T / 2."""
    ens = paths(incomplete_market(), n_paths=20_000, steps=20)
    for q, entropy in (([0.5, 0.0], 0.125), ([1.0, 0.0], 0.5)):
        mc = stoch_exponential(np.array(q), ens)
        assert reweighted_expectation(mc, np.ones(ens.n_paths)).within(1.0, n_se=4)
        est = relative_entropy(mc)
        assert est.direct.within(entropy, n_se=4)
        assert est.girsanov.within(entropy, n_se=4)
        assert est.discrepancy.within(0.0, n_se=4)


def test_girsanov_drift() -> None:
    """Test B_T has mean q T under Q^q."""
    ens = paths(incomplete_market(), n_paths=20_000, steps=20)
    mc = stoch_exponential(np.array([0.5, 0.0]), ens)
    assert reweighted_expectation(mc, ens.b[:, -1, 0]).within(0.5, n_se=4)
    assert reweighted_expectation(mc, lambda e: e.b[:, -1, 1]).within(0.0, n_se=4)
    assert mc.effective_sample_size() > 0.5 * ens.n_paths


def test_simulate_wealth() -> None:
    """Test holding one unit of risk in a driftless market gives x0 + B_T."""
    ens = paths(brownian_market(), n_paths=50, steps=5)
    wealth = simulate_wealth(ens, np.ones((50, 5, 1)), 2.0)
    assert np.allclose(wealth[:, 0], 2.0)
    assert np.allclose(wealth[:, -1], 2.0 + ens.b[:, -1, 0])


def test_young_inequality() -> None:
    """Test the gap is nonnegative and its minimum over x."""
    x = np.linspace(0.01, 5.0, 50)[:, None]
    y = np.linspace(-2.0, 2.0, 41)[None, :]
    for p in (0.5, 1.0, 3.0):
        assert np.all(young_inequality_gap(x, y, p) >= -1e-12)
    best = 2.0 * math.exp(2.0 * 0.3 - 1.0)
    assert young_inequality_gap(best, 0.3, 2.0) == pytest.approx(math.exp(0.6) * (1.0 - math.exp(-1.0)))


def test_to_frame(tmp_path) -> None:
    """Test the debugging export."""
    ens = paths(factor_market(), n_paths=3, steps=2)
    frame = to_frame(ens)
    assert list(frame.columns) == ["path", "node", "t", "s1", "v", "b1", "b2"]
    assert len(frame) == 9
    with pytest.raises(ReportError):
        to_frame(ens, max_rows=8)
    export_csv(ens, str(tmp_path / "paths.csv"))
    assert len(pd.read_csv(tmp_path / "paths.csv")) == 9


def test_split_halves() -> None:
    """Test the two halves are disjoint and equally sized."""
    ens = paths(brownian_market(), n_paths=101, steps=2)
    first, second = split_halves(ens)
    assert first.n_paths == second.n_paths == 50
    assert np.array_equal(second.dB, ens.dB[50:100])
