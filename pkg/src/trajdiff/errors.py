"""Exception hierarchy shared across the package.

Each family maps onto one CLI exit code (see ``trajdiff.cli``).
"""


class TrajdiffError(Exception):
    exit_code = 1


class ConfigError(TrajdiffError, ValueError):
    """Invalid configuration value, unknown key, or inconsistent settings."""

    exit_code = 2


class ScenarioGenerationError(TrajdiffError, RuntimeError):
    """Rejection sampling could not place every obstacle within the retry budget."""

    exit_code = 2


class AlignmentError(TrajdiffError, ValueError):
    """Paired data (paths, responses, scenarios) do not line up."""

    exit_code = 3


class ArtifactError(TrajdiffError, ValueError):
    """Model artifact is missing, truncated, or has the wrong version header."""

    exit_code = 4


class DomainError(TrajdiffError, ValueError):
    """Argument outside the mathematical domain of a function."""


class DegenerateDistributionError(DomainError):
    """Zero-variance sample where a spread is required."""


class FittingError(TrajdiffError, ValueError):
    """Not enough (or not enough varied) data to fit a model."""


class TrainingError(TrajdiffError, RuntimeError):
    """Non-finite loss or other failure inside the optimisation loop."""


class ResponseParseError(TrajdiffError, ValueError):
    """A structured response could not be parsed.

    ``field`` names the offending JSON field (``None`` for syntax errors).
    """

    exit_code = 3

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class MalformedResponseError(ResponseParseError):
    pass


class MissingFieldError(ResponseParseError):
    pass


class UnknownAdviceError(ResponseParseError):
    pass


class PathLengthError(ResponseParseError):
    pass
