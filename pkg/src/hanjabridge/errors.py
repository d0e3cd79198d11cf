"""Shared exception types. Exit-code mapping lives in the CLI."""


class HanjaBridgeError(Exception):
    """Base class for package errors."""


class LexiconFormatError(HanjaBridgeError):
    """Malformed or inconsistent lexicon input."""


class VocabError(HanjaBridgeError):
    """Invalid vocabulary construction or expansion."""


class EncodingError(HanjaBridgeError):
    """Inconsistent token/span structure."""


class AugmentError(HanjaBridgeError):
    """Augmentation failed, e.g. candidate tokens missing from the vocab."""


class AlignmentError(HanjaBridgeError):
    """Student/teacher encodings cannot be aligned."""


class CheckpointError(HanjaBridgeError):
    """Unreadable, version-mismatched, or shape-mismatched checkpoint."""


class NumericalError(HanjaBridgeError):
    """Non-finite loss or other numerical failure (CLI exit code 3)."""


class ConfigError(HanjaBridgeError):
    """Infeasible or inconsistent configuration."""


class ArtifactMissingError(HanjaBridgeError):
    """A required run artifact does not exist (CLI exit code 2)."""
