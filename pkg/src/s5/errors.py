"""Exception taxonomy shared across the pipeline.

Each class maps to one CLI exit code (see cli.py): config errors exit 2,
ingestion/IO errors exit 3, checkpoint/model errors exit 4, numeric aborts
exit 5.
"""


class ConfigError(ValueError):
    """Invalid configuration value or unknown config key."""


class IngestionError(IOError):
    """A manifest entry points at a missing or malformed file."""


class CheckpointError(RuntimeError):
    """Checkpoint is unreadable or incompatible with the requested model."""


class NumericError(RuntimeError):
    """Training produced a non-finite loss; carries recent step logs."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or []


class DimensionError(ValueError):
    """Tensor operands have incompatible shapes."""


class GraphStateError(RuntimeError):
    """Backward invoked twice on the same graph without a reset."""
