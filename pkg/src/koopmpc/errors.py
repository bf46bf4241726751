"""Exception hierarchy shared by every stage of the pipeline."""

from __future__ import annotations


class KoopmpcError(Exception):
    """Base class for all package errors."""


class ConfigError(KoopmpcError, ValueError):
    """Unknown plant, bad parameter, or malformed config file."""


class ShapeError(KoopmpcError, ValueError):
    """Array handed across an interface has the wrong shape."""


class NumericalError(KoopmpcError, ArithmeticError):
    """Base for failures that stem from the numbers rather than the setup."""


class IntegrationError(NumericalError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class SimulationDiverged(NumericalError):
    def __init__(self, message: str, time: float):
        super().__init__(message)
        self.time = time


class SteadyStateError(NumericalError):
    pass


class InsufficientHistory(KoopmpcError, ValueError):
    pass


class DegenerateChannel(KoopmpcError, ValueError):
    def __init__(self, channel: str):
        super().__init__(f"channel {channel!r} has zero range")
        self.channel = channel


class EmptyDataset(KoopmpcError, ValueError):
    pass


class DivergenceError(NumericalError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class NonRepresentableDynamics(NumericalError):
    pass


class CheckpointFormatError(KoopmpcError, ValueError):
    pass


class StructureMismatch(CheckpointFormatError):
    pass


class TrainingDivergence(NumericalError):
    """Raised when loss or gradient goes non-finite.

    Carries the best snapshot seen so far and the partial report so callers
    can still persist something useful.
    """

    def __init__(self, message: str, model=None, report=None):
        super().__init__(message)
        self.model = model
        self.report = report


class SolverFailure(NumericalError):
    def __init__(self, message: str, solution=None):
        super().__init__(message)
        self.solution = solution
