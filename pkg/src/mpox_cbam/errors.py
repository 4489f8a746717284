"""Exception types shared across the package."""


class CBAMError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(CBAMError, ValueError):
    pass


class InvalidConfig(CBAMError, ValueError):
    pass


class NumericalError(CBAMError, ArithmeticError):
    pass


class GraphError(CBAMError, RuntimeError):
    pass


class NoTrainableParameters(CBAMError, RuntimeError):
    pass


class InvalidLabel(CBAMError, ValueError):
    pass


class DegenerateFold(CBAMError, ValueError):
    """A cross-validation training split is missing one of the classes."""


class FormatError(CBAMError, ValueError):
    """A checkpoint or image file is corrupt.

    ``offset`` is the byte offset at which decoding failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedFormat(CBAMError, ValueError):
    def __init__(self, path, magic: bytes):
        super().__init__(f"{path}: unsupported image format (magic bytes {magic!r})")
        self.path = str(path)
        self.magic = magic


class EmptyClass(CBAMError, ValueError):
    pass
