from typing import Optional


class PromptSTError(Exception):
    """Base class for every error raised by promptst"""
    exit_code = 1


class UsageError(PromptSTError):
    exit_code = 1


# Data problems (exit code 2)

class DataError(PromptSTError):
    exit_code = 2


class DataFormatError(DataError):
    """A grid-series file could not be parsed"""

    def __init__(self, message: str, line: Optional[int] = None, path: Optional[str] = None):
        self.line = line
        self.path = path
        where = ""
        if path:
            where += f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


class MalformedHeaderError(DataFormatError):
    pass


class RowCountError(DataFormatError):
    pass


class NegativeValueError(DataFormatError):
    pass


class SeriesTooShortError(DataError):
    pass


class NotNormalizedError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


# Shape and configuration problems (exit code 3)

class ShapeError(PromptSTError):
    exit_code = 3


class DimensionError(ShapeError, ValueError):
    pass


class ShapeMismatchError(ShapeError):
    """A named array does not have the shape its configuration implies"""

    def __init__(self, name: str, expected, found):
        self.name = name
        self.expected = tuple(expected)
        self.found = tuple(found)
        super().__init__(f"array '{name}': expected shape {self.expected}, found {self.found}")


class ConfigError(ShapeError):
    pass


class PromptConfigError(ConfigError):
    pass


class CheckpointFormatError(ShapeError):
    pass


# Numerical problems

class NonFiniteError(PromptSTError, FloatingPointError):
    """An op produced NaN or Inf"""

    def __init__(self, op: str):
        self.op = op
        super().__init__(f"non-finite values produced by op '{op}'")


class MissingGradientError(PromptSTError):
    pass
