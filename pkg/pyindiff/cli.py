"""Command-line interface to price claims by utility indifference."""
import asyncio
import dataclasses
import logging
import sys
from functools import wraps
from typing import Any, Callable, Coroutine, List, Optional, TypeVar

import click

from . import asymptotics, duality, oracle, pricing, report
from ._version import __version__
from .config import RunConfig, load_config
from .drivers import DriverContext
from .exceptions import ModelValidationError, NumericalError, ReportError, UnboundedPayoffError
from .geometry import ConstraintSet
from .model import MarketModel, Payoff, check_assumption1, check_assumption2, validate_model
from .models import Verdict
from .paths import PathEnsemble, TimeGrid, simulate
from .utils import parse_float_list

T = TypeVar("T")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_REPORT = 4

_LOGGER = logging.getLogger(__name__)


def coro(f: Callable[..., Coroutine[Any, Any, T]]) -> Callable[..., T]:
    """Allow to use async in click."""

    @wraps(f)
    def wrapper(*args: Any, **kwargs: Any) -> T:
        """Async wrapper."""
        return asyncio.run(f(*args, **kwargs))

    return wrapper


class IndiffGroup(click.Group):
    """Group that maps usage errors to exit code 1 and returns the command's exit code."""

    def main(self, *args: Any, **kwargs: Any) -> Any:  # type: ignore[override]
        """Run the command without click's own exit handling."""
        kwargs["standalone_mode"] = False
        try:
            code = super().main(*args, **kwargs)
        except click.exceptions.Abort:
            click.echo("Aborted!", err=True)
            sys.exit(EXIT_USAGE)
        except click.ClickException as ex:
            ex.show()
            sys.exit(EXIT_USAGE)
        sys.exit(code if isinstance(code, int) else EXIT_OK)


@dataclasses.dataclass
class Session:
    """Everything a command needs: the resolved config, the market and the report being built."""

    config: RunConfig
    model: MarketModel
    constraint: ConstraintSet
    payoff: Payoff
    artifacts: report.RunReport
    out: str

    def ensemble(self) -> PathEnsemble:
        """Paths for the configured seed, size and grid."""
        solver = self.config.solver
        return simulate(
            self.model, TimeGrid(self.model.horizon, solver.steps), solver.paths, solver.seed, solver.threads
        )


def _setup_logging(verbose: int) -> None:
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _fail(code: int, ex: Exception) -> int:
    field = getattr(ex, "field", None)
    where = f" [{field}]" if field else ""
    click.echo(f"Error{where}: {getattr(ex, 'message', ex)}", err=True)
    return code


def run_options(f: Callable[..., Any]) -> Callable[..., Any]:
    """Options shared by every command."""
    options = [
        click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False),
                     help="JSON run config."),
        click.option("--out", default="out", show_default=True, type=click.Path(file_okay=False),
                     help="Directory for report.json and the CSV tables."),
        click.option("--seed", type=click.IntRange(min=0), help="Overrides solver.seed."),
        click.option("--paths", type=click.IntRange(min=2), help="Overrides solver.paths."),
        click.option("--steps", type=click.IntRange(min=1), help="Overrides solver.steps."),
        click.option("--alpha", type=click.FloatRange(min=0, min_open=True), help="Overrides risk.alpha."),
        click.option("--alpha-grid", help="Comma separated alphas, overrides risk.alpha_grid."),
        click.option("--threads", type=click.IntRange(min=1), help="Worker threads (default $PYINDIFF_THREADS)."),
        click.option("-v", "--verbose", count=True, help="More logging, repeat for debug output."),
    ]
    for option in reversed(options):
        f = option(f)
    return f


def command_runner(name: str) -> Callable[[Callable[[Session], Any]], Callable[..., int]]:
    """Load the config, run the body and write the artifacts, mapping failures to exit codes."""

    def decorate(body: Callable[[Session], Any]) -> Callable[..., int]:
        @wraps(body)
        def wrapper(
            config_path: str,
            out: str,
            seed: Optional[int],
            paths: Optional[int],
            steps: Optional[int],
            alpha: Optional[float],
            alpha_grid: Optional[str],
            threads: Optional[int],
            verbose: int,
        ) -> int:
            _setup_logging(verbose)
            try:
                config = load_config(
                    config_path,
                    seed=seed,
                    paths=paths,
                    steps=steps,
                    alpha=alpha,
                    alpha_grid=None if alpha_grid is None else parse_float_list(alpha_grid),
                    threads=threads,
                )
                model = config.build_model()
                session = Session(
                    config,
                    model,
                    config.build_constraint(model),
                    config.payoff.build(model),
                    report.RunReport(name, config.as_dict(), config.solver.seed),
                    out,
                )
                outcome = body(session)
                verdict = outcome if isinstance(outcome, Verdict) else Verdict.PASS
                session.artifacts.status = verdict.value
                session.artifacts.write(out)
            except ModelValidationError as ex:
                return _fail(EXIT_VALIDATION, ex)
            except NumericalError as ex:
                return _fail(EXIT_NUMERICAL, ex)
            except ReportError as ex:
                return _fail(EXIT_REPORT, ex)
            click.echo(f"{name}: {verdict.value}, artifacts in {out}")
            if verdict is Verdict.FAIL:
                return EXIT_VALIDATION if name == "validate" else EXIT_NUMERICAL
            return EXIT_OK

        return wrapper

    return decorate


@click.group(cls=IndiffGroup)
@click.version_option(__version__)
def main() -> None:
    """Utility indifference prices, hedges and dual checks from a JSON config."""


@main.command("validate")
@run_options
@command_runner("validate")
def validate(session: Session) -> Verdict:
    """Check the model coefficients and the integrability of the payoff."""
    model_report = validate_model(session.model, seed=session.config.solver.seed)
    session.artifacts.add("model", model_report.as_dict())
    ensemble = session.ensemble()
    params = session.config.risk.params()
    first = check_assumption1(session.model, session.payoff, params, ensemble)
    second = check_assumption2(session.model, session.payoff, params, ensemble)
    session.artifacts.add("assumption1", first.as_dict())
    session.artifacts.add("assumption2", second.as_dict())
    if first.verdict is Verdict.FAIL:
        return Verdict.FAIL
    return Verdict.WARN if first.verdict is Verdict.WARN else Verdict.PASS


def _price_runs(session: Session, ensemble: Optional[PathEnsemble]) -> List[pricing.PriceRun]:
    cfg = session.config
    runs = []
    for a in cfg.risk.alphas:
        runs.append(
            pricing.run_price(
                session.model,
                session.constraint,
                cfg.risk.params(a),
                session.payoff,
                ensemble,
                cfg.solver.basis,
                cfg.solver.method,
                cfg.solver.clamp_policy,
                grid_points=cfg.asymptotics.grid_points if cfg.solver.method == "pde" else None,
            )
        )
    return runs


def _worst(verdicts: List[Verdict]) -> Verdict:
    if Verdict.FAIL in verdicts:
        return Verdict.FAIL
    return Verdict.WARN if Verdict.WARN in verdicts else Verdict.PASS


@main.command("price")
@run_options
@command_runner("price")
def price(session: Session) -> Verdict:
    """Indifference price C_0 = Y_0(F) - Y_0(0) for every configured alpha."""
    runs = _price_runs(session, session.ensemble())
    reports = [run.report for run in runs]
    session.artifacts.add("prices", [r.as_dict() for r in reports])
    session.artifacts.table(report.PRICE_FILE, report.price_frame(reports, session.config.solver.method))
    for r in reports:
        click.echo(f"alpha={r.alpha:g}: C0 = {r.price.value:.6f} +- {r.price.se:.6f} (tolerance {r.tolerance:.2e})")
    return _worst([r.verdict for r in reports])


@main.command("hedge")
@run_options
@command_runner("hedge")
def hedge_command(session: Session) -> Verdict:
    """Optimal strategies with and without the claim, and the hedge between them."""
    ensemble = session.ensemble()
    runs = _price_runs(session, ensemble)
    hedges = []
    for run in runs:
        result = pricing.hedge(run)
        utility = pricing.utility_along_strategy(run, 0.0)
        hedges.append(
            {"alpha": run.params.alpha, **result.as_dict(), "expected_utility": utility.as_dict(),
             "value_function": run.report.value_function(0.0)}
        )
    session.artifacts.add("hedges", hedges)
    reports = [run.report for run in runs]
    session.artifacts.table(report.PRICE_FILE, report.price_frame(reports, "hedge"))
    return _worst([r.verdict for r in reports])


@main.command("dual-audit")
@run_options
@command_runner("dual-audit")
def dual_audit(session: Session) -> Verdict:
    """Duality gaps of the optimal density and of random admissible perturbations."""
    cfg = session.config
    ensemble = session.ensemble()
    tol = cfg.tolerances
    runs = _price_runs(session, ensemble)
    rows: List[duality.AuditRow] = []
    summaries = []
    for run in runs:
        audit = duality.dual_audit(run.claim, tol.dual_candidates, cfg.solver.seed, tol.perturbation_scale)
        rows.extend(dataclasses.replace(row, candidate=f"alpha={run.params.alpha:g}:{row.candidate}") for row in audit)
        summary = {"alpha": run.params.alpha, "optimal_gap": audit[0].as_dict()}
        if session.constraint.is_cone:
            summary["minimal_entropy_price"] = duality.minimal_entropy_price(
                run.claim, run.zero, session.payoff
            ).as_dict()
        summaries.append(summary)
    session.artifacts.add("audits", summaries)
    session.artifacts.table(report.DUAL_AUDIT_FILE, report.dual_audit_frame(rows))
    return Verdict.PASS if all(row.weak_duality_ok for row in rows) else Verdict.WARN


@main.command("sweep")
@run_options
@command_runner("sweep")
@coro
async def sweep(session: Session) -> Verdict:
    """Prices along the alpha grid, with the small and large risk aversion limits as corridor."""
    cfg = session.config
    ensemble = session.ensemble()
    small = large = None
    if session.constraint.is_cone and session.payoff.bounds is not None:
        small = asymptotics.small_alpha_price(
            session.model, session.constraint, session.payoff, ensemble, cfg.solver.basis
        ).price
        superrep = await asymptotics.async_large_alpha_price(
            session.model, session.constraint, session.payoff, cfg.asymptotics.m_ladder, ensemble,
            cfg.asymptotics.grid_points, cfg.asymptotics.domain_sds, cfg.asymptotics.lattice_directions,
            cfg.solver.seed, cfg.solver.threads,
        )
        large = None if superrep.lower_bound_only else superrep.value
        session.artifacts.add("large_alpha", superrep.as_dict())
    result = await asymptotics.async_alpha_sweep(
        session.model, session.constraint, session.payoff, cfg.risk.alphas, ensemble, cfg.solver.basis,
        cfg.risk.params(), cfg.solver.method, small, large, cfg.solver.threads, cfg.tolerances.corridor,
    )
    session.artifacts.add("sweep", result.as_dict())
    session.artifacts.table(report.SWEEP_FILE, report.sweep_frame(result))
    return Verdict.PASS if result.verdict is Verdict.PASS else Verdict.WARN


@main.command("asymptotics")
@run_options
@command_runner("asymptotics")
@coro
async def asymptotics_command(session: Session) -> Verdict:
    """Small and large risk aversion limits and the price generator audit."""
    cfg = session.config
    ensemble = session.ensemble()
    small = asymptotics.small_alpha_price(session.model, session.constraint, session.payoff, ensemble, cfg.solver.basis)
    session.artifacts.add("small_alpha", small.as_dict())
    martingale_ok = small.density_mean.within(1.0, cfg.tolerances.martingale_se)
    session.artifacts.add("small_alpha_density_is_martingale", martingale_ok)
    try:
        superrep = await asymptotics.async_large_alpha_price(
            session.model, session.constraint, session.payoff, cfg.asymptotics.m_ladder, ensemble,
            cfg.asymptotics.grid_points, cfg.asymptotics.domain_sds, cfg.asymptotics.lattice_directions,
            cfg.solver.seed, cfg.solver.threads,
        )
    except UnboundedPayoffError as ex:
        session.artifacts.add("large_alpha", {"error": str(ex)})
        superrep = None
    if superrep is not None:
        session.artifacts.add("large_alpha", superrep.as_dict())
        if superrep.grid_u is not None:
            session.artifacts.table(report.HJB_GRID_FILE, report.hjb_grid_frame(superrep))
    audit = asymptotics.generator_limit_audit(
        DriverContext.constant(session.constraint, ensemble.sigma[0, 0], ensemble.theta[0, 0], 1.0),
        cfg.asymptotics.audit_samples,
        seed=cfg.solver.seed,
        tol=cfg.tolerances.generator,
    )
    session.artifacts.add("generator_audit", audit.as_dict())
    ok = audit.passed and martingale_ok and (superrep is None or superrep.monotone_in_m)
    return Verdict.PASS if ok else Verdict.WARN


@main.command("oracle")
@run_options
@command_runner("oracle")
def oracle_command(session: Session) -> Verdict:
    """Closed form reference prices for the degenerate cases."""
    rows = []
    results = []
    for a in session.config.risk.alphas:
        found = oracle.oracle_price(session.model, session.constraint, session.payoff, a)
        results.append({"alpha": a, **found.as_dict()})
        rows.append({"alpha": a, "method": f"oracle-{found.method}", "price": found.value, "price_se": 0.0,
                     "tolerance": session.config.tolerances.oracle_abs})
        click.echo(f"alpha={a:g}: reference price {found.value:.10f} ({found.method})")
    session.artifacts.add("oracle", results)
    session.artifacts.table(report.PRICE_FILE, report.oracle_frame(rows))
    return Verdict.PASS

