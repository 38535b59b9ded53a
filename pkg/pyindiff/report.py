"""Run artifacts: report.json and the CSV tables."""
import dataclasses
import logging
import os
import time
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd

from ._version import __version__
from .asymptotics import SuperreplicationSolution, SweepReport
from .duality import AuditRow
from .exceptions import ReportError
from .pricing import PriceReport
from .utils import to_json

_LOGGER = logging.getLogger(__name__)

REPORT_FILE = "report.json"
PRICE_FILE = "price.csv"
SWEEP_FILE = "sweep.csv"
DUAL_AUDIT_FILE = "dual_audit.csv"
HJB_GRID_FILE = "hjb_grid.csv"
FLOAT_FORMAT = "%.12g"


def price_frame(reports: Sequence[PriceReport], run_id: str) -> pd.DataFrame:
    """One row per price report."""
    return pd.DataFrame([r.as_row(run_id) for r in reports])


def sweep_frame(sweep: SweepReport) -> pd.DataFrame:
    """One row per alpha."""
    frame = pd.DataFrame(sweep.rows())
    frame["monotone"] = sweep.monotone
    return frame


def dual_audit_frame(rows: Sequence[AuditRow]) -> pd.DataFrame:
    """One row per dual candidate with the weak duality flag."""
    return pd.DataFrame([row.as_dict() for row in rows])


def hjb_grid_frame(solution: SuperreplicationSolution) -> pd.DataFrame:
    """u(0, v) for every control bound on the ladder, long format."""
    if solution.grid_v is None or solution.grid_u is None:
        raise ReportError("the superreplication solution carries no grid")
    frames = []
    for (m, est), u in zip(solution.m_values, solution.grid_u):
        frames.append(pd.DataFrame({"m": m, "v": solution.grid_v, "u0": u, "richardson": est.se}))
    return pd.concat(frames, ignore_index=True)


@dataclasses.dataclass
class RunReport:
    """Collects the results of one command and writes them once at the end."""

    command: str
    config: Dict[str, Any]
    seed: Optional[int]
    started: float = dataclasses.field(default_factory=time.perf_counter)
    results: Dict[str, Any] = dataclasses.field(default_factory=dict)
    tables: Dict[str, pd.DataFrame] = dataclasses.field(default_factory=dict)
    status: str = "ok"

    def add(self, key: str, value: Any) -> None:
        """Attach a result to report.json."""
        self.results[key] = value

    def table(self, name: str, frame: pd.DataFrame) -> None:
        """Attach a CSV table."""
        self.tables[name] = frame

    def as_dict(self) -> Dict[str, Any]:
        """The JSON document."""
        return {
            "command": self.command,
            "version": __version__,
            "seed": self.seed,
            "config": self.config,
            "status": self.status,
            "wall_clock_seconds": time.perf_counter() - self.started,
            "results": self.results,
            "files": sorted([REPORT_FILE] + list(self.tables)),
        }

    def write(self, out_dir: str) -> List[str]:
        """Write report.json and every table into out_dir; returns the written paths."""
        written = []
        try:
            os.makedirs(out_dir, exist_ok=True)
            for name, frame in sorted(self.tables.items()):
                path = os.path.join(out_dir, name)
                frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
                written.append(path)
            path = os.path.join(out_dir, REPORT_FILE)
            with open(path, "w", encoding="utf-8") as handle:
                handle.write(to_json(self.as_dict(), compact=False))
                handle.write("\n")
            written.append(path)
        except OSError as ex:
            raise ReportError(f"cannot write artifacts to {out_dir}: {ex.strerror}") from ex
        _LOGGER.info("Wrote %d artifacts to %s", len(written), out_dir)
        return written


def read_table(out_dir: str, name: str) -> pd.DataFrame:
    """Load a CSV table written by RunReport.write."""
    try:
        return pd.read_csv(os.path.join(out_dir, name))
    except OSError as ex:
        raise ReportError(f"cannot read {name} from {out_dir}: {ex.strerror}") from ex


def oracle_frame(rows: Sequence[Dict[str, Any]]) -> pd.DataFrame:
    """Reference prices in the layout of price.csv."""
    return pd.DataFrame(list(rows))
