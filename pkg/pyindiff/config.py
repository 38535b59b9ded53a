"""JSON run configuration."""
import copy
import dataclasses
import json
import logging
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .exceptions import ConfigError
from .expressions import Expression, state_variables
from .geometry import ConstraintSet
from .model import (
    CoefficientBounds,
    FactorBlock,
    MarketModel,
    Payoff,
    RiskParams,
    build_example,
    expression_matrix,
    expression_vector,
)
from .regression import BasisFamily, RegressionBasis
from .solver import ClampPolicy
from .utils import is_strictly_increasing

_LOGGER = logging.getLogger(__name__)

SECTIONS = ("model", "constraint", "payoff", "risk", "solver", "asymptotics", "tolerances")


def _require(record: Mapping[str, Any], key: str, path: str) -> Any:
    if key not in record:
        raise ConfigError("missing", field=f"{path}.{key}")
    return record[key]


def _number(value: Any, path: str, positive: bool = False) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"expected a number, got {value!r}", field=path)
    if positive and not value > 0:
        raise ConfigError("must be positive", field=path)
    return float(value)


def _integer(value: Any, path: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"expected an integer, got {value!r}", field=path)
    if value < minimum:
        raise ConfigError(f"must be at least {minimum}", field=path)
    return value


def _numbers(value: Any, path: str, length: Optional[int] = None) -> List[float]:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        value = [value]
    if not isinstance(value, list):
        raise ConfigError(f"expected a list of numbers, got {value!r}", field=path)
    out = [_number(v, f"{path}[{i}]") for i, v in enumerate(value)]
    if length is not None and len(out) != length:
        raise ConfigError(f"expected {length} entries, got {len(out)}", field=path)
    return out


def _check_keys(record: Any, allowed: Sequence[str], path: str) -> Mapping[str, Any]:
    if not isinstance(record, dict):
        raise ConfigError(f"expected an object, got {type(record).__name__}", field=path)
    unknown = sorted(set(record) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown keys {unknown}", field=path)
    return record


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    """The market: either a generic expression model or the one factor example shorthand."""

    record: Dict[str, Any]

    GENERIC_KEYS = ("m", "d", "horizon", "s0", "drift", "volatility", "factor", "state_box", "bounds", "label")
    EXAMPLE_KEYS = ("theta", "sigma", "eta", "kappa", "horizon", "s0", "v0", "state_box", "label")

    @staticmethod
    def from_dict(record: Any) -> "ModelConfig":
        """Validate the section keys; the model itself is built lazily."""
        record = _check_keys(record, ("example",) + ModelConfig.GENERIC_KEYS, "model")
        if "example" in record:
            if set(record) != {"example"}:
                raise ConfigError("the example shorthand cannot be mixed with generic keys", field="model")
            _check_keys(record["example"], ModelConfig.EXAMPLE_KEYS, "model.example")
        return ModelConfig(copy.deepcopy(dict(record)))

    @property
    def is_example(self) -> bool:
        """True for the one factor shorthand."""
        return "example" in self.record

    def build(self) -> MarketModel:
        """Parse the expressions and build the market."""
        if self.is_example:
            return self._build_example(self.record["example"])
        return self._build_generic(self.record)

    @staticmethod
    def _build_example(ex: Mapping[str, Any]) -> MarketModel:
        path = "model.example"
        fns = {}
        for key in ("theta", "sigma", "eta"):
            expr = Expression(ex.get(key, 0.0 if key == "eta" else _require(ex, key, path)), field=f"{path}.{key}")
            expr.check_variables(frozenset({"v"}))
            fns[key] = (lambda e: lambda v: e.evaluate({"v": v}))(expr)
        kappa = _numbers(_require(ex, "kappa", path), f"{path}.kappa", 2)
        box = ex.get("state_box")
        return build_example(
            fns["theta"],
            fns["sigma"],
            fns["eta"],
            kappa[0],
            kappa[1],
            _number(_require(ex, "horizon", path), f"{path}.horizon", positive=True),
            s0=_number(ex.get("s0", 1.0), f"{path}.s0", positive=True),
            v0=_number(ex.get("v0", 0.0), f"{path}.v0"),
            label=str(ex.get("label", "factor")),
            state_box=None if box is None else _state_box(box, f"{path}.state_box"),
        )

    @staticmethod
    def _build_generic(rec: Mapping[str, Any]) -> MarketModel:
        m = _integer(_require(rec, "m", "model"), "model.m")
        d = _integer(_require(rec, "d", "model"), "model.d")
        factor_rec = rec.get("factor")
        allowed = state_variables(m, d, factor_rec is not None) - {f"b{j + 1}" for j in range(m)}
        drift_src = _require(rec, "drift", "model")
        if not isinstance(drift_src, list) or len(drift_src) != d:
            raise ConfigError(f"expected {d} expressions", field="model.drift")
        drift = [Expression(src, field=f"model.drift[{i}]") for i, src in enumerate(drift_src)]
        vol_src = _require(rec, "volatility", "model")
        if not isinstance(vol_src, list) or len(vol_src) != d or any(
            not isinstance(row, list) or len(row) != m for row in vol_src
        ):
            raise ConfigError(f"expected a {d}x{m} matrix of expressions", field="model.volatility")
        vol = [
            [Expression(src, field=f"model.volatility[{i}][{j}]") for j, src in enumerate(row)]
            for i, row in enumerate(vol_src)
        ]
        exprs = drift + [e for row in vol for e in row]
        factor = None
        if factor_rec is not None:
            factor_rec = _check_keys(factor_rec, ("eta", "kappa", "v0", "label"), "model.factor")
            eta = Expression(factor_rec.get("eta", 0.0), field="model.factor.eta")
            eta.check_variables(frozenset({"t", "v"}))
            kappa = np.array(_numbers(_require(factor_rec, "kappa", "model.factor"), "model.factor.kappa", m))
            factor = FactorBlock(
                eta=lambda t, v: eta.evaluate({"t": t, "v": v}),
                kappa=kappa,
                v0=_number(factor_rec.get("v0", 0.0), "model.factor.v0"),
                label=eta.source,
            )
            exprs.append(eta)
        reads = frozenset()
        for expr in exprs:
            expr.check_variables(allowed)
            reads |= expr.variables
        bounds_rec = _check_keys(rec.get("bounds", {}), ("drift", "volatility", "theta"), "model.bounds")
        bounds = CoefficientBounds(
            **{k: _number(v, f"model.bounds.{k}", positive=True) for k, v in bounds_rec.items()}
        )
        box = _state_box(rec.get("state_box", {}), "model.state_box")
        s0 = np.array(_numbers(rec.get("s0", [1.0] * d), "model.s0", d))
        return MarketModel(
            m=m,
            d=d,
            horizon=_number(_require(rec, "horizon", "model"), "model.horizon", positive=True),
            s0=s0,
            drift=expression_vector(drift),
            volatility=expression_matrix(vol),
            factor=factor,
            bounds=bounds,
            state_box=box,
            reads=reads,
            label=str(rec.get("label", "market")),
        )


def _state_box(record: Any, path: str) -> Dict[str, Tuple[float, float]]:
    if not isinstance(record, dict):
        raise ConfigError("expected an object", field=path)
    box = {}
    for name, pair in record.items():
        lo, hi = _numbers(pair, f"{path}.{name}", 2)
        if not lo < hi:
            raise ConfigError("need lower < upper", field=f"{path}.{name}")
        box[name] = (lo, hi)
    return box


@dataclasses.dataclass(frozen=True)
class PayoffConfig:
    """Payoff expression with optional declared bounds and path aggregate."""

    expression: str
    bounds: Optional[Tuple[float, float]] = None
    aggregate: Optional[str] = None

    @staticmethod
    def from_dict(record: Any) -> "PayoffConfig":
        """Accept a bare expression string or an object."""
        if isinstance(record, (str, int, float)) and not isinstance(record, bool):
            return PayoffConfig(str(record))
        record = _check_keys(record, ("expression", "bounds", "aggregate"), "payoff")
        bounds = record.get("bounds")
        if bounds is not None:
            lo, hi = _numbers(bounds, "payoff.bounds", 2)
            if lo > hi:
                raise ConfigError("need lower <= upper", field="payoff.bounds")
            bounds = (lo, hi)
        return PayoffConfig(str(_require(record, "expression", "payoff")), bounds, record.get("aggregate"))

    def build(self, model: MarketModel) -> Payoff:
        """Parse against the variables of the market."""
        return Payoff.from_expression(self.expression, model, self.bounds, self.aggregate)


@dataclasses.dataclass(frozen=True)
class RiskConfig:
    """Risk aversion (single value or grid) and the integrability constants."""

    alpha: Optional[float] = None
    alpha_grid: Optional[Tuple[float, ...]] = None
    p: float = 2.0
    epsilon: float = 1.0
    k: Optional[float] = None

    @staticmethod
    def from_dict(record: Any) -> "RiskConfig":
        """Parse the risk section."""
        record = _check_keys(record, ("alpha", "alpha_grid", "p", "epsilon", "k"), "risk")
        alpha = record.get("alpha")
        grid = record.get("alpha_grid")
        if alpha is None and grid is None:
            raise ConfigError("need alpha or alpha_grid", field="risk")
        out = RiskConfig(
            alpha=None if alpha is None else _number(alpha, "risk.alpha", positive=True),
            alpha_grid=None if grid is None else tuple(_numbers(grid, "risk.alpha_grid")),
            p=_number(record.get("p", 2.0), "risk.p"),
            epsilon=_number(record.get("epsilon", 1.0), "risk.epsilon", positive=True),
            k=None if record.get("k") is None else _number(record["k"], "risk.k"),
        )
        if out.alpha_grid is not None:
            if not is_strictly_increasing(list(out.alpha_grid)) or out.alpha_grid[0] <= 0:
                raise ConfigError("must be positive and strictly increasing", field="risk.alpha_grid")
        if out.p <= 1:
            raise ConfigError("must exceed 1", field="risk.p")
        return out

    @property
    def alphas(self) -> List[float]:
        """The grid, or the single alpha."""
        if self.alpha_grid is not None:
            return list(self.alpha_grid)
        assert self.alpha is not None
        return [self.alpha]

    def params(self, alpha: Optional[float] = None) -> RiskParams:
        """RiskParams at alpha (default: the configured alpha or the first grid point)."""
        chosen = alpha if alpha is not None else (self.alpha if self.alpha is not None else self.alphas[0])
        return RiskParams(alpha=chosen, p=self.p, epsilon=self.epsilon, k=self.k)


@dataclasses.dataclass(frozen=True)
class SolverConfig:
    """Simulation and regression settings; the seed is mandatory."""

    seed: int
    paths: int = 20_000
    steps: int = 50
    method: str = "lsmc"
    family: str = "poly"
    degree: int = 2
    ridge: float = 1.0e-8
    knots: int = 8
    clamp: bool = True
    threads: Optional[int] = None

    @staticmethod
    def from_dict(record: Any) -> "SolverConfig":
        """Parse the solver section."""
        record = _check_keys(
            record,
            ("seed", "paths", "steps", "method", "family", "degree", "ridge", "knots", "clamp", "threads"),
            "solver",
        )
        family = record.get("family", "poly")
        if family not in [f.value for f in BasisFamily]:
            raise ConfigError(f"unknown basis family {family!r}", field="solver.family")
        method = record.get("method", "lsmc")
        if method not in ("lsmc", "pde"):
            raise ConfigError(f"unknown method {method!r}", field="solver.method")
        threads = record.get("threads")
        return SolverConfig(
            seed=_integer(_require(record, "seed", "solver"), "solver.seed", minimum=0),
            paths=_integer(record.get("paths", 20_000), "solver.paths", minimum=2),
            steps=_integer(record.get("steps", 50), "solver.steps"),
            method=method,
            family=family,
            degree=_integer(record.get("degree", 2), "solver.degree"),
            ridge=_number(record.get("ridge", 1.0e-8), "solver.ridge"),
            knots=_integer(record.get("knots", 8), "solver.knots", minimum=2),
            clamp=bool(record.get("clamp", True)),
            threads=None if threads is None else _integer(threads, "solver.threads"),
        )

    @property
    def basis(self) -> RegressionBasis:
        """The regression basis."""
        return RegressionBasis(BasisFamily(self.family), self.degree, self.ridge, self.knots)

    @property
    def clamp_policy(self) -> ClampPolicy:
        """The corridor clamp."""
        return ClampPolicy(enabled=self.clamp)


@dataclasses.dataclass(frozen=True)
class AsymptoticsConfig:
    """Control ladder and grid for the large risk aversion limit."""

    m_ladder: Tuple[float, ...] = (1.0, 2.0, 4.0, 8.0, 16.0)
    grid_points: int = 801
    domain_sds: float = 8.0
    lattice_directions: int = 16
    audit_samples: int = 10_000

    @staticmethod
    def from_dict(record: Any) -> "AsymptoticsConfig":
        """Parse the asymptotics section."""
        record = _check_keys(
            record, ("m_ladder", "grid_points", "domain_sds", "lattice_directions", "audit_samples"), "asymptotics"
        )
        ladder = tuple(_numbers(record.get("m_ladder", [1, 2, 4, 8, 16]), "asymptotics.m_ladder"))
        if not ladder or not is_strictly_increasing(list(ladder)) or ladder[0] <= 0:
            raise ConfigError("must be positive and strictly increasing", field="asymptotics.m_ladder")
        return AsymptoticsConfig(
            m_ladder=ladder,
            grid_points=_integer(record.get("grid_points", 801), "asymptotics.grid_points", minimum=5),
            domain_sds=_number(record.get("domain_sds", 8.0), "asymptotics.domain_sds", positive=True),
            lattice_directions=_integer(record.get("lattice_directions", 16), "asymptotics.lattice_directions"),
            audit_samples=_integer(record.get("audit_samples", 10_000), "asymptotics.audit_samples"),
        )


@dataclasses.dataclass(frozen=True)
class Tolerances:
    """Every tolerance a verdict depends on; all of them are echoed into the report."""

    n_se: float = 3.0
    oracle_abs: float = 0.01
    martingale_se: float = 4.0
    corridor: float = 0.01
    saturation: float = 1.0e-3
    generator: float = 1.0e-9
    dual_candidates: int = 20
    perturbation_scale: float = 0.5

    @staticmethod
    def from_dict(record: Any) -> "Tolerances":
        """Parse the tolerances section."""
        names = [f.name for f in dataclasses.fields(Tolerances)]
        record = _check_keys(record, names, "tolerances")
        values: Dict[str, Any] = {}
        for key, value in record.items():
            if key == "dual_candidates":
                values[key] = _integer(value, "tolerances.dual_candidates", minimum=0)
            else:
                values[key] = _number(value, f"tolerances.{key}", positive=True)
        return Tolerances(**values)


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """A fully resolved run: every default filled in."""

    model: ModelConfig
    constraint: Dict[str, Any]
    payoff: PayoffConfig
    risk: RiskConfig
    solver: SolverConfig
    asymptotics: AsymptoticsConfig
    tolerances: Tolerances

    @staticmethod
    def from_dict(data: Any) -> "RunConfig":
        """Parse and validate a config dict."""
        data = _check_keys(data, SECTIONS, "config")
        constraint = _check_keys(
            _require(data, "constraint", "config"), ("kind", "basis", "generators", "lower", "upper"), "constraint"
        )
        return RunConfig(
            model=ModelConfig.from_dict(_require(data, "model", "config")),
            constraint=copy.deepcopy(dict(constraint)),
            payoff=PayoffConfig.from_dict(_require(data, "payoff", "config")),
            risk=RiskConfig.from_dict(_require(data, "risk", "config")),
            solver=SolverConfig.from_dict(_require(data, "solver", "config")),
            asymptotics=AsymptoticsConfig.from_dict(data.get("asymptotics", {})),
            tolerances=Tolerances.from_dict(data.get("tolerances", {})),
        )

    def build_model(self) -> MarketModel:
        """The market."""
        return self.model.build()

    def build_constraint(self, model: MarketModel) -> ConstraintSet:
        """The constraint set in R^d."""
        try:
            return ConstraintSet.from_config(self.constraint, model.d)
        except ConfigError:
            raise
        except (ValueError, TypeError) as ex:
            raise ConfigError(str(ex), field="constraint") from ex

    def as_dict(self) -> Dict[str, Any]:
        """The resolved config; parsing it again gives the same run."""
        return {
            "model": copy.deepcopy(self.model.record),
            "constraint": copy.deepcopy(self.constraint),
            "payoff": {
                "expression": self.payoff.expression,
                "bounds": None if self.payoff.bounds is None else list(self.payoff.bounds),
                "aggregate": self.payoff.aggregate,
            },
            "risk": {
                "alpha": self.risk.alpha,
                "alpha_grid": None if self.risk.alpha_grid is None else list(self.risk.alpha_grid),
                "p": self.risk.p,
                "epsilon": self.risk.epsilon,
                "k": self.risk.k,
            },
            "solver": dataclasses.asdict(self.solver),
            "asymptotics": {**dataclasses.asdict(self.asymptotics), "m_ladder": list(self.asymptotics.m_ladder)},
            "tolerances": dataclasses.asdict(self.tolerances),
        }


def apply_overrides(data: Mapping[str, Any], **overrides: Any) -> Dict[str, Any]:
    """Copy of the raw config with command line values set; None means not given."""
    out = copy.deepcopy(dict(data))
    solver = dict(out.get("solver") or {})
    risk = dict(out.get("risk") or {})
    for key in ("seed", "paths", "steps", "threads"):
        if overrides.get(key) is not None:
            solver[key] = overrides[key]
    if overrides.get("alpha") is not None:
        risk["alpha"] = overrides["alpha"]
        risk.pop("alpha_grid", None)
    if overrides.get("alpha_grid") is not None:
        risk["alpha_grid"] = list(overrides["alpha_grid"])
        risk.pop("alpha", None)
    out["solver"] = solver
    out["risk"] = risk
    return out


def load_config(path: str, **overrides: Any) -> RunConfig:
    """Read a JSON config file and apply the command line overrides."""
    try:
        with open(path, encoding="utf-8") as handle:
            data = json.load(handle)
    except OSError as ex:
        raise ConfigError(f"cannot read {path}: {ex.strerror}", field="config") from ex
    except json.JSONDecodeError as ex:
        raise ConfigError(f"invalid JSON at line {ex.lineno}: {ex.msg}", field="config") from ex
    config = RunConfig.from_dict(apply_overrides(data, **overrides))
    _LOGGER.debug("Loaded config %s", path)
    return config
