"""Exception hierarchy.

Data problems derive from ``DataError`` and numerical problems from
``NumericError`` so the command line can map them onto exit codes.
"""


class ManikeyError(Exception):
    pass


class DataError(ManikeyError):
    pass


class NumericError(ManikeyError):
    pass


class EmptyCapture(DataError):
    pass


class AllPointsFiltered(DataError):
    pass


class EmptyDataset(DataError):
    pass


class ConfigMismatch(DataError, ValueError):
    pass


class InvalidParams(DataError, ValueError):
    pass


class InvalidPermutation(DataError, ValueError):
    pass


class InvalidK(DataError, ValueError):
    pass


class SampleFormatError(DataError):
    """Raised when a sample file cannot be parsed; ``path`` names the file."""

    def __init__(self, path, message):
        self.path = str(path)
        super().__init__(f"{self.path}: {message}")


class MalformedHeader(SampleFormatError):
    pass


class MissingFile(SampleFormatError):
    pass


class ShapeMismatch(SampleFormatError, ValueError):
    """Array shapes disagree. ``path`` is None for in-memory mismatches."""

    def __init__(self, message, path=None):
        self.path = None if path is None else str(path)
        ManikeyError.__init__(self, message if path is None else f"{path}: {message}")


class NonFiniteInput(NumericError, ValueError):
    pass


class SolveFailed(NumericError):
    def __init__(self, message, residual=float("nan")):
        self.residual = residual
        super().__init__(f"{message} (residual norm {residual:.3e})")
