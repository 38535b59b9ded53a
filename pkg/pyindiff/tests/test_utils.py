"""Tests for the Utils."""
import math

import numpy as np
import pytest

from pyindiff import utils
from pyindiff.exceptions import ConfigError


def test_to_json_numpy_values() -> None:
    """Test numpy scalars and arrays are serialized."""
    text = utils.to_json({"b": np.float64(1.5), "a": np.arange(3)})
    assert text == '{"a":[0,1,2],"b":1.5}'


def test_to_json_non_finite() -> None:
    """Test inf and nan become labels."""
    text = utils.to_json({"x": [math.inf, -math.inf, math.nan]})
    assert text == '{"x":["inf","-inf","nan"]}'


def test_to_json_pretty() -> None:
    """Test the indented form."""
    assert utils.to_json({"a": 1}, compact=False) == '{\n  "a": 1\n}'


def test_parse_float_list() -> None:
    """Test parsing a comma separated grid."""
    assert utils.parse_float_list("0.1, 0.5,1") == [0.1, 0.5, 1.0]
    with pytest.raises(ConfigError):
        utils.parse_float_list("0.1,abc")
    with pytest.raises(ConfigError):
        utils.parse_float_list(" , ")


def test_default_threads(monkeypatch: pytest.MonkeyPatch) -> None:
    """Test the explicit value wins over the environment."""
    monkeypatch.setenv(utils.THREADS_ENV, "3")
    assert utils.default_threads() == 3
    assert utils.default_threads(2) == 2
    with pytest.raises(ConfigError):
        utils.default_threads(0)
    monkeypatch.setenv(utils.THREADS_ENV, "many")
    assert utils.default_threads() >= 1


def test_is_strictly_increasing() -> None:
    """Test the ordering check."""
    assert utils.is_strictly_increasing([0.1, 0.2, 1.0])
    assert not utils.is_strictly_increasing([0.1, 0.1])
    assert utils.is_strictly_increasing([])
