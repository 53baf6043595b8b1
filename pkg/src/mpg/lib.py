import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

# Arguments of log() in rewards and potentials are floored here so that
# boundary iterates (zero consumption, zero rate) stay finite.
LOG_FLOOR = 1e-12

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_NON_MPG = 2
EXIT_INCONCLUSIVE = 3
EXIT_USAGE = 64
EXIT_NOINPUT = 66
EXIT_SOFTWARE = 70

THREADS_ENV = "MPG_THREADS"


class MpgError(RuntimeError):
    """Base class for every error raised by the toolkit"""


class ConfigurationError(MpgError, ValueError):
    """Invalid parameters, mismatched dimensions or a malformed experiment file"""

    def __init__(self, *args, key=None, **kwargs):
        """
        :param key:
            The configuration field at fault, when known.
        """
        self.key = key
        super().__init__(*args, **kwargs)


class NumericalDomainError(MpgError, ArithmeticError):
    """An evaluation produced a non-finite value"""

    def __init__(self, *args, step=None, coordinate=None, location=None, **kwargs):
        """
        :param step:
            Rollout step at which the non-finite state appeared.
        :param coordinate:
            Finite-difference coordinate whose evaluation failed.
        :param location:
            Quadrature abscissa in [0, 1] along a line-integral path.
        """
        self.step = step
        self.coordinate = coordinate
        self.location = location
        super().__init__(*args, **kwargs)


class PathError(MpgError):
    """A line-integral path leaves the state x parameter box"""

    def __init__(self, *args, location=None, **kwargs):
        self.location = location
        super().__init__(*args, **kwargs)


class ConvergenceError(MpgError):
    """An iterative solver hit its iteration cap"""

    def __init__(self, *args, residual=None, **kwargs):
        self.residual = residual
        super().__init__(*args, **kwargs)


class InfeasibleError(MpgError):
    """A parameter vector lies outside the parameter box"""


def log_floor(value):
    return np.maximum(value, LOG_FLOOR)


def worker_count():
    """
    Number of worker threads, capped by the MPG_THREADS environment variable.
    """
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        count = int(raw)
    except ValueError:
        log.warning(f"Ignoring non-integer {THREADS_ENV}={raw!r}, using a single thread.")
        return 1
    return max(1, count)


def ordered_map(fn, items):
    """
    Map fn over items with up to worker_count() threads.

    Results come back in submission order, so any reduction over them is
    independent of the thread count.
    """
    items = list(items)
    workers = min(worker_count(), len(items))
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def to_jsonable(value):
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [to_jsonable(v) for v in value.tolist()]
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, float) and not np.isfinite(value):
        return repr(value)
    return value


def canonical_json(payload):
    return json.dumps(to_jsonable(payload), sort_keys=True, indent=2) + "\n"


def config_hash(payload):
    text = json.dumps(to_jsonable(payload), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(payload))
    log.debug(f"Wrote {path}")
