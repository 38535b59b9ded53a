"""Tests for the command line interface."""
import json
from pathlib import Path
from typing import Any, Dict, List

import pytest
from click.testing import CliRunner, Result

from pyindiff import cli, report
from pyindiff.tests.fixtures import factor_config


def invoke(tmp_path: Path, config: Dict[str, Any], *args: str) -> Result:
    """Write the config and run one command with --out in tmp_path."""
    path = tmp_path / "run.json"
    path.write_text(json.dumps(config), encoding="utf-8")
    argv: List[str] = list(args) + ["--config", str(path), "--out", str(tmp_path / "out")]
    return CliRunner().invoke(cli.main, argv)


def read_report(tmp_path: Path) -> Dict[str, Any]:
    """The report.json of the last run."""
    return json.loads((tmp_path / "out" / report.REPORT_FILE).read_text(encoding="utf-8"))


@pytest.fixture()
def pde_config() -> Dict[str, Any]:
    """The factor example solved on the grid."""
    return factor_config(
        solver={"seed": 7, "paths": 200, "steps": 10, "method": "pde"},
        asymptotics={"grid_points": 401},
    )


def test_version() -> None:
    """Test --version."""
    result = CliRunner().invoke(cli.main, ["--version"])
    assert result.exit_code == cli.EXIT_OK
    assert cli.__version__ in result.output


def test_price_on_the_grid(tmp_path: Path, pde_config: Dict[str, Any]) -> None:
    """Test the factor example price of V_T and its artifacts."""
    result = invoke(tmp_path, pde_config, "price")
    assert result.exit_code == cli.EXIT_OK, result.output
    assert "alpha=1: C0 = " in result.output
    table = report.read_table(str(tmp_path / "out"), report.PRICE_FILE)
    assert table["price"].iloc[0] == pytest.approx(0.14, abs=1e-3)
    doc = read_report(tmp_path)
    assert doc["command"] == "price"
    assert doc["seed"] == 7
    assert doc["config"]["solver"]["method"] == "pde"


def test_alpha_override(tmp_path: Path, pde_config: Dict[str, Any]) -> None:
    """Test --alpha-grid replaces the configured alpha."""
    result = invoke(tmp_path, pde_config, "price", "--alpha-grid", "0.5,2")
    assert result.exit_code == cli.EXIT_OK, result.output
    table = report.read_table(str(tmp_path / "out"), report.PRICE_FILE)
    assert table["alpha"].tolist() == [0.5, 2.0]
    assert read_report(tmp_path)["config"]["risk"]["alpha"] is None


def test_oracle(tmp_path: Path) -> None:
    """Test the reference price when the factor is the stock."""
    config = factor_config(
        model={"example": {"theta": "0.3", "sigma": "0.2", "kappa": [1, 0], "horizon": 1.0}}
    )
    result = invoke(tmp_path, config, "oracle")
    assert result.exit_code == cli.EXIT_OK, result.output
    table = report.read_table(str(tmp_path / "out"), report.PRICE_FILE)
    assert list(table.columns) == ["alpha", "method", "price", "price_se", "tolerance"]
    assert table["price"].iloc[0] == pytest.approx(-0.3, abs=1e-8)


def test_oracle_unavailable(tmp_path: Path) -> None:
    """Test a correlated factor has no closed form."""
    result = invoke(tmp_path, factor_config(), "oracle")
    assert result.exit_code == cli.EXIT_NUMERICAL
    assert "Error" in result.output
    assert not (tmp_path / "out" / report.REPORT_FILE).exists()


def test_validate(tmp_path: Path) -> None:
    """Test the validation report of a bounded payoff."""
    config = factor_config(payoff={"expression": "tanh(v)", "bounds": [-1, 1]})
    result = invoke(tmp_path, config, "validate")
    assert result.exit_code == cli.EXIT_OK, result.output
    doc = read_report(tmp_path)
    assert doc["status"] in ("pass", "warn")
    assert {"model", "assumption1", "assumption2"} <= set(doc["results"])


def test_invalid_config(tmp_path: Path) -> None:
    """Test config errors exit with 2 and name the field."""
    result = invoke(tmp_path, factor_config(solver={"paths": 100}), "price")
    assert result.exit_code == cli.EXIT_VALIDATION
    assert "Error [solver.seed]: missing" in result.output


def test_bad_json(tmp_path: Path) -> None:
    """Test unparsable config files."""
    path = tmp_path / "run.json"
    path.write_text("not json", encoding="utf-8")
    result = CliRunner().invoke(cli.main, ["price", "--config", str(path), "--out", str(tmp_path / "out")])
    assert result.exit_code == cli.EXIT_VALIDATION


def test_usage_errors(tmp_path: Path) -> None:
    """Test missing options and unknown commands exit with 1."""
    assert CliRunner().invoke(cli.main, ["price"]).exit_code == cli.EXIT_USAGE
    assert CliRunner().invoke(cli.main, ["frobnicate"]).exit_code == cli.EXIT_USAGE
    path = tmp_path / "run.json"
    path.write_text(json.dumps(factor_config()), encoding="utf-8")
    result = CliRunner().invoke(cli.main, ["price", "--config", str(path), "--paths", "1"])
    assert result.exit_code == cli.EXIT_USAGE


def test_report_error(tmp_path: Path, pde_config: Dict[str, Any]) -> None:
    """Test an output path that is a file exits with 4."""
    (tmp_path / "out").write_text("", encoding="utf-8")
    result = invoke(tmp_path, pde_config, "price")
    assert result.exit_code == cli.EXIT_REPORT


def test_sweep_on_the_grid(tmp_path: Path) -> None:
    """Test the sweep table in a market where the factor is the stock."""
    config = factor_config(
        model={"example": {"theta": "0.3", "sigma": "0.2", "kappa": [1, 0], "horizon": 1.0}},
        risk={"alpha_grid": [0.5, 1.0, 2.0]},
        solver={"seed": 7, "paths": 200, "steps": 10, "method": "pde", "threads": 1},
        asymptotics={"grid_points": 401},
    )
    result = invoke(tmp_path, config, "sweep")
    assert result.exit_code == cli.EXIT_OK, result.output
    table = report.read_table(str(tmp_path / "out"), report.SWEEP_FILE)
    assert table["price"].tolist() == pytest.approx([-0.3, -0.3, -0.3], abs=1e-6)
    assert read_report(tmp_path)["results"]["sweep"]["verdict"] == "pass"


def test_oracle_without_trading(tmp_path: Path) -> None:
    """Test the certainty equivalent of B_T is alpha T / 2."""
    config = factor_config(
        model={"m": 1, "d": 1, "horizon": 1.0, "drift": ["0"], "volatility": [["1"]]},
        constraint={"kind": "zero"},
        payoff="b1",
    )
    result = invoke(tmp_path, config, "oracle")
    assert result.exit_code == cli.EXIT_OK, result.output
    table = report.read_table(str(tmp_path / "out"), report.PRICE_FILE)
    assert table["price"].iloc[0] == pytest.approx(0.5, abs=1e-8)


def test_validate_rejects_unnormalized_factor(tmp_path: Path) -> None:
    """Test kappa must have unit length."""
    config = factor_config(
        model={"example": {"theta": "0.3", "sigma": "0.2", "kappa": [0.6, 0.6], "horizon": 1.0}}
    )
    result = invoke(tmp_path, config, "validate")
    assert result.exit_code == cli.EXIT_VALIDATION
    assert "Error" in result.output
