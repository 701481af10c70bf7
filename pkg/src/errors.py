from __future__ import annotations

from typing import Optional


class LabError(Exception):
    """Base class for every failure the lab reports to the user."""

    exit_code = 1


class ConfigError(LabError):
    exit_code = 2


class ArgumentError(LabError, ValueError):
    exit_code = 2


class DataError(LabError):
    exit_code = 3


class ParseError(DataError):
    """A CSV row that does not match the expected layout."""

    def __init__(self, message: str, line: Optional[int] = None, path: Optional[str] = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class DomainError(LabError, ValueError):
    exit_code = 3


class SizeError(LabError, ValueError):
    exit_code = 3


class EvaluationError(LabError):
    exit_code = 3


class NumericalError(LabError):
    exit_code = 4


class DegenerateInputError(NumericalError, ValueError):
    exit_code = 4


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, LabError):
        return exc.exit_code
    if isinstance(exc, OSError):
        return 3
    return 1
