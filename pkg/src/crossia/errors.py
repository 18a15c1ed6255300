"""Exception hierarchy shared across the pipeline.

Every error raised on purpose by this package derives from PipelineError so
callers (and the CLI exit-code mapping) can distinguish our failures from
genuine bugs.
"""


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgument(PipelineError, ValueError):
    """An operation was called with arguments violating its preconditions."""


class NotFound(PipelineError, LookupError):
    """A referenced instance/record does not exist."""


class CannotSample(PipelineError):
    """The database cannot supply a single eligible training pair."""


class NumericError(PipelineError):
    """A numeric invariant broke (non-finite values, zero-norm vectors)."""


class FormatError(PipelineError):
    """A persisted artifact has an unknown or unsupported format/version."""


class IntegrityError(PipelineError):
    """A persisted artifact references data that is missing or corrupt."""


class BackendError(PipelineError):
    """An external perception backend is unavailable or misbehaved."""


class GoalUnreachable(PipelineError):
    """No free navigation cell exists within the allowed radius."""


class ConfigError(PipelineError):
    """A run configuration file is invalid."""


class MissingArtifact(PipelineError):
    """A pipeline stage requires an artifact another stage has not produced."""
