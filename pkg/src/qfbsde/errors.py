"""Exception hierarchy shared by the solver stack and the CLI."""

from __future__ import annotations


class QfbsdeError(Exception):
    """Base class for all library errors."""


class ModelDomainError(QfbsdeError):
    """A coefficient or transform was evaluated outside its domain."""


class CapacityError(QfbsdeError):
    """Requested arrays exceed the configured memory budget."""


class ShapeError(QfbsdeError, ValueError):
    """Array shapes or grids do not match."""


class InconsistencyError(QfbsdeError):
    """Bracket, clock or density data contradict each other."""


class BlowUpError(QfbsdeError):
    """A simulated state became non-finite.

    Attributes
    ----------
    path, step : int
        First offending path and time index.
    """

    def __init__(self, message: str, path: int, step: int):
        super().__init__(message)
        self.path = path
        self.step = step


class ConfigurationError(QfbsdeError, ValueError):
    """Missing or invalid configuration (e.g. partials not supplied)."""


class NumericalError(QfbsdeError):
    """Linear algebra failure, carrying a condition-number diagnostic."""

    def __init__(self, message: str, condition: float = float("nan")):
        super().__init__(message)
        self.condition = condition


class IterationLimitError(QfbsdeError):
    """Picard iteration did not reach the tolerance."""

    def __init__(self, message: str, history: list[float]):
        super().__init__(message)
        self.history = list(history)


class TruncationBindingError(QfbsdeError):
    """A truncation level was active at convergence in strict mode."""

    def __init__(self, message: str, flags: dict[str, bool]):
        super().__init__(message)
        self.flags = dict(flags)


class MarketDegenerateError(QfbsdeError):
    """beta q q* beta* (or beta beta*) is singular."""


class ValidationError(QfbsdeError, ValueError):
    """Experiment configuration failed schema or hypothesis checks."""

    def __init__(self, message: str, issues: list[dict] | None = None):
        super().__init__(message)
        self.issues = list(issues or [])


class SamplingError(QfbsdeError):
    """Too few usable cells for a statistical check."""
