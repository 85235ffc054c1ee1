"""Exception hierarchy shared across the package.

The CLI maps ``ValidationError`` to exit code 3 and everything else derived
from ``Vid2LogError`` to exit code 4.
"""


class Vid2LogError(Exception):
    """Base class for all package errors."""


class ValidationError(Vid2LogError):
    """Input data failed a contract check."""


class ManifestFormatError(ValidationError):
    """Manifest file is malformed or has an unsupported version."""


class MissingImageError(ValidationError):
    """A manifest entry points at an image that does not exist."""


class LabelError(ValidationError):
    """A label is inconsistent with the vocabulary or dataset mode."""


class ShapeError(ValidationError):
    """Tensor or image dimensions do not match what was expected."""


class CheckpointError(ValidationError):
    """Checkpoint file is corrupt, truncated or of the wrong version."""


class TrainingError(Vid2LogError):
    """Training could not proceed (empty data, non-finite loss, ...)."""
