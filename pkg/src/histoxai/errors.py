"""Exception hierarchy.

``InputError`` subclasses describe problems with what the user handed us
(files, config values, names) and map to CLI exit code 2. Everything else
derived from ``HistoxaiError`` is an internal failure (exit code 1).
"""

from __future__ import annotations


class HistoxaiError(Exception):
    """Base class for all toolkit errors."""


class InputError(HistoxaiError):
    """Raised for invalid user input: paths, names, config values."""


class ConfigError(InputError):
    """One or more config validation problems, reported together."""

    def __init__(self, problems: list[str] | str):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("invalid config:\n  - " + "\n  - ".join(self.problems))


class DatasetError(InputError):
    pass


class ManifestError(InputError):
    pass


class ModelError(InputError):
    pass


class PretrainedWeightsUnavailable(ModelError):
    pass


class CheckpointError(InputError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class PreprocessError(InputError):
    pass


class AttributionError(HistoxaiError):
    pass


class EvaluationError(InputError):
    pass


class TrainingError(HistoxaiError):
    """Training aborted; carries the epoch/batch coordinates when known."""

    def __init__(self, message: str, epoch: int | None = None, batch: int | None = None):
        self.epoch = epoch
        self.batch = batch
        where = ""
        if epoch is not None:
            where = f" (epoch {epoch}" + (f", batch {batch})" if batch is not None else ")")
        super().__init__(message + where)


class AttributionInputError(AttributionError, InputError):
    """Bad attribution request: unknown method, target class, or parameter."""
