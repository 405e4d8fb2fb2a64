"""Exception types shared across the package.

Everything raised on purpose derives from :class:`BlockmarkError` so CLI code
can map failures to exit codes without enumerating modules.
"""


class BlockmarkError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatchError(BlockmarkError, ValueError):
    """Operands disagree on channel count, block size, or tensor shape."""


class DivisibilityError(BlockmarkError, ValueError):
    """Image width or height is not a multiple of the block size."""


class PixelRangeError(BlockmarkError, ValueError):
    """Pixel values fall outside the closed interval [0, 1]."""


class EmptyDatasetError(BlockmarkError, ValueError):
    """An operation that needs at least one sample got none."""


class DataError(BlockmarkError, ValueError):
    """A dataset, directory, or record is missing or inconsistent."""


class MalformedFileError(DataError):
    """File cannot be parsed in its declared container format."""


class UnsupportedVersionError(DataError):
    """File declares a format version this build does not understand."""


class DigestMismatchError(DataError):
    """Stored digest does not match the one recomputed from content."""
