"""Models."""
import dataclasses
import math
from enum import Enum
from typing import Any, Dict

import numpy as np


@dataclasses.dataclass(frozen=True)
class Estimate:
    """A Monte Carlo point estimate with its standard error."""

    value: float
    se: float

    @staticmethod
    def from_samples(samples: np.ndarray) -> "Estimate":
        """Build the estimate from i.i.d. samples."""
        samples = np.asarray(samples, dtype=float)
        n = samples.size
        se = float(np.std(samples, ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
        return Estimate(value=float(np.mean(samples)), se=se)

    @staticmethod
    def exact(value: float) -> "Estimate":
        """Wrap a deterministic value."""
        return Estimate(value=float(value), se=0.0)

    def within(self, target: float, n_se: float = 3.0, abs_tol: float = 0.0) -> bool:
        """Return True if target lies within n_se standard errors (plus abs_tol)."""
        return abs(self.value - target) <= n_se * self.se + abs_tol

    def __sub__(self, other: "Estimate") -> "Estimate":
        """Difference of independent estimates."""
        return Estimate(self.value - other.value, math.hypot(self.se, other.se))

    def as_dict(self) -> Dict[str, Any]:
        """Convert to a dict."""
        return {"value": self.value, "se": self.se}


class Verdict(Enum):
    """Outcome of an advisory check."""

    PASS = "pass"
    WARN = "warn"
    FAIL = "fail"
