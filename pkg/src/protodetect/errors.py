"""Exception types shared across the engine.

Plain I/O failures (missing files, permissions) are raised as the builtin
OSError family; everything engine-specific derives from EngineError.
"""


class EngineError(Exception):
    """Base class for all engine errors."""


class EmptyMaskError(EngineError):
    """Mask has no foreground pixel, so no bounding box exists."""


class MalformedRleError(EngineError):
    """Run lengths are inconsistent with the declared mask dimensions."""


class ZeroVectorError(EngineError):
    """Vector norm is below the normalization threshold."""


class DimensionMismatchError(EngineError):
    """Embedding or prototype dimensions disagree."""


class DuplicateClassError(EngineError):
    """A class id occurs more than once."""


class MissingEmbeddingsError(EngineError):
    """A retained proposal has no embedding."""


class UnknownClassError(EngineError):
    """A detection references a class id with no registration."""


class FormatError(EngineError):
    """Base class for file-format errors."""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class VersionMismatchError(FormatError):
    """File declares a format version this reader does not support."""


class CorruptError(FormatError):
    """File is truncated or fails its internal consistency checks."""


class SchemaViolationError(FormatError):
    """A record violates the format schema; the message names its location."""
