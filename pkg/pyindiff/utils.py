import json
import logging
import math
import os
from typing import Any, List, Optional

import numpy as np

from .exceptions import ConfigError

_LOGGER = logging.getLogger(__name__)

THREADS_ENV = "PYINDIFF_THREADS"


def _json_default(obj: Any) -> Any:
    """Make numpy scalars and arrays serializable."""
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if hasattr(obj, "as_dict"):
        return obj.as_dict()
    raise TypeError(f"Object of type {type(obj).__name__} is not JSON serializable")


def _finite_or_label(value: Any) -> Any:
    """Replace inf/nan by strings, JSON has no literal for them."""
    if isinstance(value, float) and not math.isfinite(value):
        return "inf" if value > 0 else ("-inf" if value < 0 else "nan")
    if isinstance(value, dict):
        return {k: _finite_or_label(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_finite_or_label(v) for v in value]
    return value


def to_json(dump_obj: Any, compact: bool = True) -> str:
    """Convert an object to json, numpy values included."""
    plain = json.loads(json.dumps(dump_obj, default=_json_default))
    cleaned = _finite_or_label(plain)
    if compact:
        return json.dumps(cleaned, separators=(",", ":"), sort_keys=True)
    return json.dumps(cleaned, indent=2, sort_keys=True)


def parse_float_list(text: str) -> List[float]:
    """Parse a comma separated list such as '0.1,0.5,1'."""
    try:
        values = [float(part) for part in text.split(",") if part.strip()]
    except ValueError as ex:
        raise ConfigError(f"not a list of numbers: {text!r}", field="alpha_grid") from ex
    if not values:
        raise ConfigError("empty list", field="alpha_grid")
    return values


def default_threads(explicit: Optional[int] = None) -> int:
    """Return the worker count: explicit value, then the environment, then the cpu count."""
    if explicit is not None:
        if explicit < 1:
            raise ConfigError("must be positive", field="solver.threads")
        return explicit
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            _LOGGER.warning("Ignoring %s=%r, not an integer", THREADS_ENV, env)
    return os.cpu_count() or 1


def is_strictly_increasing(values: List[float]) -> bool:
    """Return True if the sequence is strictly increasing."""
    return all(a < b for a, b in zip(values, values[1:]))
