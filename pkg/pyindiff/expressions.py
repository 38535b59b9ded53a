"""A tiny arithmetic expression language for coefficients and payoffs.

Expressions are parsed with the python ``ast`` module and checked against a
whitelist; only the grammar documented in docs/expressions.md is accepted.
Evaluation is vectorized: variables may be numpy arrays of any common shape.
"""
import ast
import logging
from typing import Callable, Dict, FrozenSet, Mapping, Optional, Union

import numpy as np

from .exceptions import ConfigError

_LOGGER = logging.getLogger(__name__)

Value = Union[float, np.ndarray]


def _step(x: Value) -> Value:
    return np.where(np.asarray(x) > 0, 1.0, 0.0)


FUNCTIONS: Dict[str, Callable[..., Value]] = {
    "exp": np.exp,
    "ln": np.log,
    "log": np.log,
    "sqrt": np.sqrt,
    "tanh": np.tanh,
    "abs": np.abs,
    "step": _step,
    "min": np.minimum,
    "max": np.maximum,
}

ARITY = {"min": 2, "max": 2}

CONSTANTS = {"pi": float(np.pi)}

_BINARY = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}


class Expression:
    """A parsed, validated expression."""

    def __init__(self, source: Union[str, float, int], field: Optional[str] = None) -> None:
        """Parse the source text; raise ConfigError on anything outside the grammar."""
        self.source = str(source)
        self.field = field
        try:
            tree = ast.parse(self.source.replace("^", "**"), mode="eval")
        except SyntaxError as ex:
            raise ConfigError(f"cannot parse {self.source!r}: {ex.msg}", field=field) from ex
        names: set = set()
        self._check(tree.body, names)
        self._tree = tree.body
        self.variables: FrozenSet[str] = frozenset(names)

    def __repr__(self) -> str:
        """Return the source text."""
        return f"Expression({self.source!r})"

    @property
    def is_constant(self) -> bool:
        """Return True if the expression reads no variable."""
        return not self.variables

    def _check(self, node: ast.AST, names: set) -> None:
        if isinstance(node, ast.Constant):
            if not isinstance(node.value, (int, float)) or isinstance(node.value, bool):
                raise ConfigError(f"unsupported literal {node.value!r}", field=self.field)
        elif isinstance(node, ast.Name):
            if node.id not in CONSTANTS:
                names.add(node.id)
        elif isinstance(node, ast.BinOp):
            if type(node.op) not in _BINARY:
                raise ConfigError(f"unsupported operator in {self.source!r}", field=self.field)
            self._check(node.left, names)
            self._check(node.right, names)
        elif isinstance(node, ast.UnaryOp):
            if not isinstance(node.op, (ast.USub, ast.UAdd)):
                raise ConfigError(f"unsupported operator in {self.source!r}", field=self.field)
            self._check(node.operand, names)
        elif isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in FUNCTIONS:
                raise ConfigError(f"unknown function in {self.source!r}", field=self.field)
            if node.keywords:
                raise ConfigError("keyword arguments are not allowed", field=self.field)
            if len(node.args) != ARITY.get(node.func.id, 1):
                raise ConfigError(
                    f"{node.func.id} takes {ARITY.get(node.func.id, 1)} argument(s)",
                    field=self.field,
                )
            for arg in node.args:
                self._check(arg, names)
        else:
            raise ConfigError(
                f"unsupported syntax {type(node).__name__} in {self.source!r}", field=self.field
            )

    def check_variables(self, allowed: FrozenSet[str]) -> None:
        """Raise ConfigError if the expression reads an unknown variable."""
        unknown = self.variables - allowed
        if unknown:
            raise ConfigError(
                f"unknown variable(s) {sorted(unknown)} in {self.source!r}, "
                f"allowed: {sorted(allowed)}",
                field=self.field,
            )

    def evaluate(self, env: Mapping[str, Value]) -> Value:
        """Evaluate with the given variable bindings."""
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            return self._eval(self._tree, env)

    def _eval(self, node: ast.AST, env: Mapping[str, Value]) -> Value:
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.Name):
            if node.id in CONSTANTS:
                return CONSTANTS[node.id]
            try:
                return env[node.id]
            except KeyError as ex:
                raise ConfigError(f"variable {node.id!r} is not bound", field=self.field) from ex
        if isinstance(node, ast.BinOp):
            return _BINARY[type(node.op)](self._eval(node.left, env), self._eval(node.right, env))
        if isinstance(node, ast.UnaryOp):
            operand = self._eval(node.operand, env)
            return -operand if isinstance(node.op, ast.USub) else operand
        assert isinstance(node, ast.Call) and isinstance(node.func, ast.Name)
        args = [self._eval(arg, env) for arg in node.args]
        return FUNCTIONS[node.func.id](*args)


def state_variables(m: int, d: int, with_factor: bool) -> FrozenSet[str]:
    """Names an expression may read for an m-dimensional market with d stocks."""
    names = {"t", "s"} | {f"s{i + 1}" for i in range(d)} | {f"b{j + 1}" for j in range(m)}
    if with_factor:
        names.add("v")
    return frozenset(names)
