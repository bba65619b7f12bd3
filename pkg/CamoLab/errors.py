"""Exception hierarchy shared by every CamoLab module."""

from typing import Optional

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


class LabError(Exception):
    """Base class for all CamoLab failures"""


class ValidationError(LabError, ValueError):
    """Bad input, bad configuration or a violated precondition"""


class ParseError(ValidationError):
    """Malformed catalog, manifest, smali or corpus text"""

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None):
        self.line = line
        self.column = column
        location = ""
        if line is not None:
            location = f" (line {line}" + (f", column {column})" if column is not None else ")")
        super().__init__(f"{message}{location}")


class CatalogDriftError(ValidationError):
    """Corpus header was written against a different catalog"""


class DimensionMismatchError(ValidationError):
    """Vector or model dimension does not match the catalog"""


class DegenerateTrainingSetError(ValidationError):
    """Training set lacks one of the two labels"""

    def __init__(self, message: str = "degenerate training set"):
        super().__init__(message)


class UsageError(ValidationError):
    """Unknown subcommand or flag"""


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the CLI exit code"""
    if isinstance(error, ValidationError):
        return EXIT_VALIDATION
    return EXIT_RUNTIME
