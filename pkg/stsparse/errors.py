"""
Exception hierarchy for the ST-SparseGCN toolkit.

Services raise these; the command-line entry point maps them to exit codes.
"""

from typing import List, Optional


class StSparseError(Exception):
    """Base class for every error raised by the toolkit."""


class DimensionError(StSparseError, ValueError):
    """Shapes or dimensions of the operands do not agree."""


class ContractError(StSparseError, ValueError):
    """A documented precondition was violated by the caller."""


class InconsistentFlipError(StSparseError):
    """An edge flip does not match the current graph state."""


class DegenerateMaskError(StSparseError):
    """A node mask selects no nodes."""


class TrainingFailure(StSparseError):
    """Training diverged (NaN or infinite loss)."""

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"training diverged at epoch {epoch}")


class UnsupportedFeaturesError(StSparseError):
    """Node features are not of the kind the operation requires."""


class InfeasibleBudgetError(StSparseError):
    """The attack budget exceeds the number of flippable node pairs."""


class UndefinedMetricError(StSparseError):
    """A metric is undefined for the given inputs."""


class IncompleteGroupError(StSparseError):
    """A record group does not cover the full rate grid and seed set."""

    def __init__(self, missing: List[tuple], message: str = ""):
        self.missing = list(missing)
        super().__init__(message or f"incomplete group, missing cells: {self.missing}")


class DataIntegrityError(StSparseError):
    """Loaded data disagrees with its manifest."""

    def __init__(self, field: str, message: str = ""):
        self.field = field
        super().__init__(message or f"integrity check failed for '{field}'")


class ParseError(StSparseError):
    """A malformed line in an input file."""

    def __init__(self, path: str, line_number: int, message: str = ""):
        self.path = path
        self.line_number = line_number
        detail = f": {message}" if message else ""
        super().__init__(f"{path}:{line_number}: malformed line{detail}")


class ConfigError(StSparseError):
    """Invalid configuration file or option."""

    def __init__(self, message: str, key: Optional[str] = None):
        self.key = key
        super().__init__(message)
