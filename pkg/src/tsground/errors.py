"""Exception types shared across the package."""


class TsgroundError(Exception):
    """Base class for package errors."""


class ManifestError(TsgroundError):
    """Malformed manifest file (carries the offending line number)."""


class ValidationError(TsgroundError):
    """A sample or dataset violates its invariants."""


class FormatError(TsgroundError):
    """Malformed binary file (feature file or checkpoint)."""


class UpgradeError(FormatError):
    """Checkpoint written by an unsupported format version."""


class SpecError(TsgroundError):
    """Invalid synthetic benchmark specification."""


class ConfigError(TsgroundError):
    """A run configuration violates one of its invariants."""


class UsageError(TsgroundError):
    """An operation applied to data it must not touch."""


class EvaluationError(TsgroundError):
    """Predictions and ground truths cannot be aligned."""


class DomainError(TsgroundError):
    """Numeric argument outside the operation's domain."""


class LogicError(TsgroundError):
    """Internal contract violated by the caller."""


class InputError(TsgroundError):
    """Model input outside the range the parameters support."""
