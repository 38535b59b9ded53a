"""Tests for the coefficient and payoff expressions."""
import math

import numpy as np
import pytest

from pyindiff.exceptions import ConfigError
from pyindiff.expressions import Expression, state_variables


def test_constant() -> None:
    """Test numbers parse to constant expressions."""
    expr = Expression(0.25)
    assert expr.is_constant
    assert expr.evaluate({}) == 0.25
    assert Expression("2*pi").evaluate({}) == pytest.approx(2 * math.pi)


def test_caret_is_power() -> None:
    """Test ^ is read as exponentiation."""
    assert Expression("2^3").evaluate({}) == 8.0


def test_vectorized_functions() -> None:
    """Test evaluation over numpy arrays."""
    expr = Expression("max(v, 0) + step(v) - abs(-1)")
    out = expr.evaluate({"v": np.array([-2.0, 0.0, 3.0])})
    assert out.tolist() == [-1.0, -1.0, 3.0]
    assert expr.variables == frozenset({"v"})


def test_unary_and_nested() -> None:
    """Test signs and nested calls."""
    expr = Expression("-exp(ln(b1)) + +tanh(0)")
    assert expr.evaluate({"b1": 2.0}) == pytest.approx(-2.0)


@pytest.mark.parametrize(
    "source",
    ["v +", "__import__('os')", "v.real", "v if v else 1", "'text'", "v == 1", "sin(v)",
     "min(v)", "exp(x=v)", "v % 2", "True"],
)
def test_rejected(source: str) -> None:
    """Test anything outside the grammar is rejected."""
    with pytest.raises(ConfigError) as err:
        Expression(source, field="payoff.expr")
    assert err.value.field == "payoff.expr"


def test_unknown_variable() -> None:
    """Test variables are checked against the market's state names."""
    allowed = state_variables(2, 1, with_factor=False)
    assert allowed == frozenset({"t", "s", "s1", "b1", "b2"})
    Expression("s1 + b2").check_variables(allowed)
    with pytest.raises(ConfigError):
        Expression("v").check_variables(allowed)
    assert "v" in state_variables(2, 1, with_factor=True)


def test_unbound_variable() -> None:
    """Test evaluation needs every variable."""
    with pytest.raises(ConfigError):
        Expression("b1").evaluate({})
