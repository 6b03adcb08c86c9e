"""
Exception hierarchy shared by the pipeline stages.

Each error class carries the process exit code the command line reports for it.
"""


class DenseFaceError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 1


class ConfigError(DenseFaceError, ValueError):
    """Invalid or unknown configuration."""

    exit_code = 2


class DataError(DenseFaceError):
    """Missing, malformed or unusable input data."""

    exit_code = 3


class NumericalFault(DenseFaceError, ArithmeticError):
    """Non-finite values or a numerically degenerate computation."""

    exit_code = 4


class TrainingDiverged(NumericalFault):
    """
    Raised when the training loss stops being finite.

    Attributes:
        checkpoint: Last weights whose loss was finite
        step: Global step at which divergence was detected
    """

    def __init__(self, message, checkpoint=None, step=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.step = step
