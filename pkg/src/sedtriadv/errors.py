"""Exception and warning types shared across the package."""


class SedError(Exception):
    """Base class for all package errors."""


class InvalidAudio(SedError):
    """Audio payload is malformed (non-finite samples, bad WAV, too short)."""


class UnsupportedRate(SedError):
    """Requested a sample-rate conversion outside the supported direction."""


class ConfigError(SedError):
    """A configuration value or combination is invalid."""


class ShapeError(SedError):
    """Tensor operands do not conform."""


class GraphConsumed(SedError):
    """backward() was called on a graph whose saved state was already freed."""


class LabelError(SedError):
    """A label value is outside its admissible set."""


class DegenerateWeights(SedError):
    """A weight vector with zero norm was passed where a direction is needed."""


class ManifestError(SedError):
    """A corpus manifest record is malformed; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CheckpointError(SedError):
    """Checkpoint file is malformed or does not match the model."""


class TrainingDiverged(SedError):
    """A loss became non-finite during training."""


class RefuseOverwrite(SedError):
    """An output path already holds data and no overwrite flag was given."""


class DomainlessBatchWarning(UserWarning):
    """A batch contained a single domain; the domain loss was skipped."""


class MaskedOutWarning(UserWarning):
    """A masked loss had no contributing entries and evaluated to zero."""
