"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit 1, data
problems exit 2, numeric failures exit 3.
"""


class NpcfgError(Exception):
    """Base class for all package errors."""


class ConfigError(NpcfgError):
    """Invalid or inconsistent configuration values."""


class DataError(NpcfgError):
    """Malformed or inconsistent input data."""


class TreebankParseError(DataError):
    """A bracketed tree could not be parsed; carries file/line context."""

    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{loc}{message}")
        self.path = path
        self.line = line


class AlignmentError(DataError):
    """Focus trees do not token-align with the corpus they annotate."""


class VocabularyMismatchError(DataError):
    """Checkpoints or corpora disagree about the vocabulary."""


class GrammarShapeError(NpcfgError):
    """Structural problem with grammar tensors (wrong rank or size)."""


class CheckpointError(DataError):
    """Unreadable, truncated, or wrong-version checkpoint payload."""


class NumericError(NpcfgError):
    """A numeric invariant failed at runtime (non-finite loss, overflow)."""


class DegenerateGrammarError(NumericError):
    """A sampling grammar rejects effectively every draw."""
