import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Dict, List, Optional, Sequence

# Probabilities are clamped to [EPS_NUM, 1] before any log or sqrt.
EPS_NUM = 1e-8
EPS_BN = 1e-5
BN_MOMENTUM = 0.1
DIRECTION_EPS = 1e-12

VERSION = "0.1.0"

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'


class PiecewiseError(Exception):
    """Root of every error raised by the library."""


class ContractViolation(PiecewiseError, ValueError):
    """A documented precondition was not met by the caller."""


class ShapeMismatchError(PiecewiseError):
    def __init__(self, node: int, op: str, message: str):
        self.node = node
        self.op = op
        super().__init__(f"node {node} ({op}): {message}")


class NonFiniteError(PiecewiseError, ArithmeticError):
    """A NaN or Inf showed up where only finite values are allowed.

    Args:
        where: The graph node or parameter block that produced the value.
        message: Extra detail for the diagnostic.
    """

    def __init__(self, where: str, message: str = "non-finite value"):
        self.where = where
        super().__init__(f"{where}: {message}")


class IdxFormatError(PiecewiseError):
    def __init__(self, path: str, offset: int, message: str):
        self.path = path
        self.offset = offset
        super().__init__(f"{path} @ offset {offset}: {message}")


class ConfigError(PiecewiseError):
    """Schema validation failure; `diagnostics` holds one line per problem."""

    def __init__(self, diagnostics: List[str]):
        self.diagnostics = list(diagnostics)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.diagnostics))


class NoLabelCompleteSubsetError(PiecewiseError):
    pass


class TrainingAbortedError(PiecewiseError):
    def __init__(self, message: str, snapshot: Optional[Dict[str, Any]] = None):
        self.snapshot = snapshot or {}
        super().__init__(message)


def configure_logging(level: str = "INFO", log_file: Optional[str] = None) -> None:
    """
    Configures root logging the same way for the CLI and scripts.

    Args:
        level: Logging level name.
        log_file: Optional file to append log records to instead of stderr.
    """
    kwargs: Dict[str, Any] = {"level": getattr(logging, level.upper(), logging.INFO), "format": LOG_FORMAT, "force": True}
    if log_file:
        kwargs.update(filename=log_file, filemode='a')
    logging.basicConfig(**kwargs)


def resolve_threads(deterministic: bool = False) -> int:
    """
    Number of workers allowed for per-instance parallel work.

    Deterministic mode always runs single-threaded. Otherwise PIECEWISE_THREADS
    caps the count (default 1).
    """
    if deterministic:
        return 1
    raw = os.environ.get("PIECEWISE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        logging.getLogger(__name__).warning(f"Ignoring non-integer PIECEWISE_THREADS={raw!r}")
        return 1


def map_chunks(fn: Callable[[Any], Any], items: Sequence[Any], threads: int = 1, chunk_size: int = 256) -> List[Any]:
    """
    Applies fn to consecutive chunks of items, on up to `threads` workers.

    Results come back in chunk order whatever the thread count, so reductions
    over them are deterministic.
    """
    chunks = [items[i:i + chunk_size] for i in range(0, len(items), chunk_size)]
    if threads <= 1 or len(chunks) <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, chunks))
