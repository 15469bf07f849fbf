"""Exception types shared across the package."""


class ShapeMismatchError(ValueError):
    """A tensor arrived with dimensions other than the declared contract."""

    def __init__(self, what: str, expected, actual):
        super().__init__(f"{what}: expected {expected}, got {actual}")
        self.expected = expected
        self.actual = actual


class DegenerateInputError(ValueError):
    """Input that is structurally valid but numerically unusable (zero-norm vector, zero-area box)."""


class ConfigError(ValueError):
    """Malformed, unknown, or out-of-range configuration content."""


class UsageError(ValueError):
    """A run was requested with arguments that cannot produce any work (e.g. empty id set)."""


class DatasetError(RuntimeError):
    """A dataset item is missing or corrupt; the message names the item."""


class CheckpointError(RuntimeError):
    """Base class for checkpoint read/write failures."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version differs from what this build reads."""


class CorruptCheckpointError(CheckpointError):
    """Checkpoint bytes do not match their manifest; nothing was applied."""


class TrainingDivergedError(RuntimeError):
    """A loss term became non-finite; the message names the offending term."""
