"""Exception types shared across the package.

The CLI maps ``ValidationError`` subclasses (bad inputs, bad config, bad
checkpoints) to exit code 1 and everything else to exit code 2.
"""


class SeqRegenError(Exception):
    """Base class for package errors."""


class ValidationError(SeqRegenError, ValueError):
    """User-facing input problem: malformed file, bad flag value, bad shape."""


class ShapeError(ValidationError):
    pass


class GraphError(SeqRegenError, RuntimeError):
    """Autodiff graph misuse (non-scalar loss, backward without a tape)."""


class ParseError(ValidationError):
    """Malformed FASTA / TSV / vocabulary / config text."""


class ConfigError(ValidationError):
    pass


class CheckpointError(ValidationError):
    """Unreadable, corrupt, or future-versioned checkpoint container."""


class TrainingDiverged(SeqRegenError, RuntimeError):
    """Raised when a training loss goes non-finite.

    ``last_good`` carries the most recent finite-loss checkpoint container
    (or None when divergence hit before the first snapshot).
    """

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good
