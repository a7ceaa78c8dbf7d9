"""Exception types shared across the library.

Every error raised on purpose derives from FocalDepthError so callers can
catch library failures without swallowing programming errors. The CLI maps
these onto exit codes (usage 1, data 2, numerical 3).
"""


class FocalDepthError(Exception):
    """Base class for all library errors."""


class ArgumentError(FocalDepthError, ValueError):
    """A caller-supplied value violates a precondition."""


class DimensionError(FocalDepthError, ValueError):
    """Shapes or channel counts do not line up."""


class BehindCameraError(FocalDepthError, ValueError):
    """Projection of a point with non-positive depth."""


class TapeStateError(FocalDepthError, RuntimeError):
    """Gradient tape used out of order (backward before forward, or twice)."""


class EmptyEvaluationError(FocalDepthError, ValueError):
    """Metric evaluation over zero valid pixels."""


class DataError(FocalDepthError):
    """Base class for dataset I/O failures."""


class MissingFileError(DataError):
    """A manifest-referenced file does not exist."""


class BitDepthError(DataError):
    """An image file has an unsupported mode or bit depth."""


class ManifestError(DataError):
    """A manifest is malformed (bad JSON, missing fields, duplicate ids)."""


class NumericalFailure(FocalDepthError, RuntimeError):
    """A non-finite value appeared where the pipeline requires finite math."""
