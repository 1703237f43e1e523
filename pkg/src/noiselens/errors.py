"""Exception hierarchy shared across the package."""


class NoiseLensError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(NoiseLensError):
    """A file could not be parsed; the message carries the offending line."""


class ValidationError(NoiseLensError):
    """Inputs are structurally readable but violate a semantic contract."""


class TrainingDivergedError(NoiseLensError):
    """The optimizer produced a non-finite loss; message carries epoch/step."""
