"""Exception hierarchy shared by the fitting, matching and estimation layers."""

from __future__ import annotations


class BpsmError(Exception):
    """Base class for every error raised by this package."""


class DatasetError(BpsmError, ValueError):
    """Input data violates a structural requirement."""


class DimensionMismatch(BpsmError, ValueError):
    pass


class SeparationDetected(BpsmError):
    """Treatment is (quasi-)perfectly separable by the covariates."""


class SingularInformation(BpsmError):
    pass


class NotConverged(BpsmError):
    pass


class ChainDiverged(BpsmError):
    pass


class NoTreatedUnits(BpsmError, ValueError):
    pass


class EmptyControlPool(BpsmError, ValueError):
    pass


class EmptyMatchSet(BpsmError):
    def __init__(self, message: str = "matched sample is empty", draw: int | None = None):
        if draw is not None:
            message = f"{message} (draw {draw})"
        super().__init__(message)
        self.draw = draw


class ReplicateFailed(BpsmError):
    """Too many bootstrap replicates failed."""

    def __init__(self, count: int, total: int):
        super().__init__(f"{count} of {total} bootstrap replicates failed")
        self.count = count
        self.total = total


class ReplicationFailed(BpsmError):
    """Too many Monte Carlo replications failed."""

    def __init__(self, failures: list[tuple[int, str]], total: int):
        shown = "; ".join(f"j={j}: {cause}" for j, cause in failures[:5])
        super().__init__(f"{len(failures)} of {total} replications failed ({shown})")
        self.failures = failures
        self.total = total


class ConfigError(BpsmError, ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("\n".join(problems))
        self.problems = problems
