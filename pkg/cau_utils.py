import hashlib
import logging
import os
import time
from pathlib import Path
from typing import Iterator, List, Sequence, TypeVar

T = TypeVar("T")

# Logging level from environment variables
LOG_LEVELS = {
    "debug": logging.DEBUG,
    "info": logging.INFO,
}
LOG_ENV_VAR = "CAU_LOG"

# Exit codes shared by every command
EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_DEPENDENCY = 3
EXIT_DIVERGENCE = 4

PADDING_ITEM = 0


class CauError(Exception):
    """Base class for every error raised by the unlearning lab."""


class CorpusParseError(CauError, ValueError):
    """A row of an interaction file could not be parsed."""

    def __init__(self, path: str, line_number: int, reason: str):
        self.path = path
        self.line_number = line_number
        super().__init__(f"{path}: line {line_number}: {reason}")


class EmptyCorpusError(CauError, ValueError):
    pass


class CorpusExhaustedError(CauError, ValueError):
    pass


class CorpusSizeError(CauError, ValueError):
    pass


class UnlearnSelectionError(CauError, ValueError):
    pass


class SolverError(CauError, ValueError):
    pass


class ScheduleError(CauError, ValueError):
    pass


class UsageError(CauError, ValueError):
    """The command line or config asks for something that cannot run."""


class DependencyError(CauError, RuntimeError):
    """An upstream artifact required by a stage is missing."""


class StalenessError(DependencyError):
    """An upstream artifact no longer matches the digest recorded for it."""


class DivergenceError(CauError, RuntimeError):
    """The normal loss blew up during unlearning and the run was aborted."""


def setup_logging(level_name: str = None) -> int:
    """
    Configure the root logger from CAU_LOG (or an explicit level name).

    Args:
        level_name: 'debug' or 'info'; read from the environment when None

    Returns:
        The logging level that was applied

    Raises:
        ValueError: If the level name is not recognised
    """
    if level_name is None:
        level_name = os.getenv(LOG_ENV_VAR, "info")
    level = LOG_LEVELS.get(level_name.strip().lower())
    if level is None:
        raise ValueError(f"{LOG_ENV_VAR} must be one of {sorted(LOG_LEVELS)}, got {level_name!r}")
    logging.basicConfig(level=level, format="%(asctime)s - %(levelname)s - %(message)s", force=True)
    return level


def hash_lines(lines: Sequence[str]) -> str:
    """Generate an MD5 hash of a sequence of text lines."""
    digest = hashlib.md5()
    for line in lines:
        digest.update(line.encode("utf-8"))
        digest.update(b"\n")
    return digest.hexdigest()


def file_digest(path) -> str:
    """Generate an MD5 hash of a file's bytes."""
    digest = hashlib.md5()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def ensure_dir(path) -> Path:
    """
    Ensure an output directory exists.

    Returns:
        Path: Path to the directory
    """
    out_dir = Path(path)
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def iter_batches(items: Sequence[T], batch_size: int) -> Iterator[List[T]]:
    """Yield consecutive chunks of at most batch_size items."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    for i in range(0, len(items), batch_size):
        yield list(items[i:i + batch_size])


class StageTimer:
    """Wall-clock timer that logs when a stage finishes."""

    def __init__(self, name: str, logger: logging.Logger):
        self.name = name
        self.logger = logger
        self.seconds = 0.0

    def __enter__(self) -> "StageTimer":
        self._start = time.time()
        self.logger.info(f"Starting {self.name}...")
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.seconds = time.time() - self._start
        if exc_type is None:
            self.logger.info(f"Completed {self.name} in {self.seconds:.2f}s")
