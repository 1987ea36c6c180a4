"""Shared exception types, grouped by the exit code they map to in the CLI."""


class EgoworldError(Exception):
    """Base class for all package errors."""


class ConfigError(EgoworldError):
    """Bad configuration or usage (CLI exit code 1)."""


class FormatError(EgoworldError):
    """Malformed artifact file: bad magic, truncation, field mismatch (exit code 2)."""


class ShapeError(EgoworldError):
    """Operand shapes incompatible; rejected before any computation."""


class DegenerateInputError(EgoworldError):
    """Numerically degenerate input, e.g. a zero-norm vector fed to cosine similarity."""


class NumericalError(EgoworldError):
    """NaN or Inf produced during a forward/backward pass (exit code 3)."""


class EpisodeFinished(EgoworldError):
    """step() called on an episode that already reached its horizon."""
